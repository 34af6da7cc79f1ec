// SPDX-License-Identifier: Apache-2.0

#include "evigrid/gradcheck.hpp"

#include <algorithm>
#include <chrono>
#include <functional>

#include "evigrid/fpo.hpp"
#include "evigrid/grounding.hpp"
#include "evigrid/losses.hpp"
#include "evigrid/model.hpp"
#include "evigrid/rng.hpp"
#include "evigrid/synth.hpp"

namespace evigrid {

namespace {

constexpr double kStep = 1e-6;

Tensor random_tensor(int rows, int cols, Rng& rng, double scale = 1.0) {
    Tensor t(rows, cols);
    for (auto& v : t.data) {
        v = rng.normal() * scale;
    }
    return t;
}

double check_consistency(Rng& rng, uint64_t seed) {
    const int k = rng.uniform_int(1, 3);
    const int c = rng.uniform_int(2, 16);
    ParamStore store;
    for (int i = 0; i < k; ++i) {
        store.add("s1." + std::to_string(i), random_tensor(1, c, rng));
        store.add("s2." + std::to_string(i), random_tensor(1, c, rng));
    }
    return grad_check(
        [k](Graph& g, ParamStore& st) {
            std::vector<Var> a, b;
            for (int i = 0; i < k; ++i) {
                a.push_back(g.param(st, "s1." + std::to_string(i)));
                b.push_back(g.param(st, "s2." + std::to_string(i)));
            }
            return losses::loss_cons(a, b);
        },
        store, kStep, seed);
}

double check_grounding(Rng& rng, uint64_t seed) {
    const int k = rng.uniform_int(1, 3);
    const int t = rng.uniform_int(2, 16);
    const int c = rng.uniform_int(2, 16);
    ParamStore store;
    store.add("frames", random_tensor(t, c, rng));
    std::vector<Interval> gts;
    for (int i = 0; i < k; ++i) {
        store.add("q." + std::to_string(i), random_tensor(1, c, rng));
        const int a = rng.uniform_int(0, t - 1);
        gts.push_back(Interval{a, rng.uniform_int(a, t - 1)});
    }
    return grad_check(
        [k, gts](Graph& g, ParamStore& st) {
            const Var frames = g.param(st, "frames");
            std::vector<Var> sims;
            for (int i = 0; i < k; ++i) {
                sims.push_back(grounding::frame_similarities(g.param(st, "q." + std::to_string(i)), frames).var);
            }
            return losses::loss_gnd(sims, gts);
        },
        store, kStep, seed);
}

struct TinySetup {
    model::ModelConfig cfg;
    model::ToyConfig toy;
};

TinySetup tiny_setup(Rng& rng) {
    TinySetup s;
    s.cfg.channels = 8;
    s.cfg.feature_dim = 8;
    s.cfg.layers = 1;
    s.cfg.heads = 2;
    s.cfg.max_frames = 16;
    s.cfg.max_question = 8;
    s.cfg.max_events = 6;  // room for AddEvent on the dispreferred side
    s.cfg.max_answer_len = 20;
    s.cfg.aggregate_semantics = rng.coin();
    s.toy.min_frames = 12;
    s.toy.max_frames = 16;
    s.toy.feature_dim = 8;
    s.toy.num_concepts = 6;
    s.toy.min_events = 1;
    s.toy.max_events = 3;
    s.toy.min_event_len = 1;
    s.toy.max_event_len = 3;
    s.toy.max_distractors = 0;
    s.toy.concept_seed = rng.next();
    return s;
}

double check_total(Rng& rng, uint64_t seed) {
    const TinySetup s = tiny_setup(rng);
    const model::LoadedSample sample = model::make_toy_sample(s.toy, s.cfg.vocab, rng.next(), 0, "g");
    ParamStore store = model::init_model(s.cfg, rng.next());
    return grad_check(
        [&](Graph& g, ParamStore& st) {
            return model::sample_loss(g, st, s.cfg, sample, losses::LossWeights{}).total_var;
        },
        store, kStep, seed);
}

double check_preference(Rng& rng, uint64_t seed) {
    const TinySetup s = tiny_setup(rng);
    const model::LoadedSample sample = model::make_toy_sample(s.toy, s.cfg.vocab, rng.next(), 0, "g");
    synth::SynthConfig sc;
    synth::RuleBasedDistorter distorter(s.cfg.vocab);
    const PreferencePair pair = synth::synthesize_pair(sample.ann, sc, distorter, rng.next());
    ParamStore store = model::init_model(s.cfg, rng.next());
    // A perturbed copy serves as the frozen reference.
    ParamStore reference = store;
    for (auto& [name, p] : reference.params()) {
        for (auto& v : p.value.data) {
            v += 0.01 * rng.normal();
        }
    }
    fpo::FpoConfig fc;
    fc.beta = rng.uniform(0.5, 2.0);
    fc.use_reference = rng.coin();
    fc.reference = fc.use_reference ? &reference : nullptr;
    return grad_check(
        [&](Graph& g, ParamStore& st) {
            Var loss;
            fpo::pair_loss(g, st, s.cfg, sample, pair, fc, &loss);
            return loss;
        },
        store, kStep, seed);
}

}  // namespace

std::vector<GradcheckRow> run_gradcheck(int instances, uint64_t seed) {
    using Check = std::function<double(Rng&, uint64_t)>;
    const std::vector<std::pair<std::string, Check>> checks = {
        {"consistency", check_consistency},
        {"grounding_bce", check_grounding},
        {"supervised_total", check_total},
        {"preference", check_preference},
    };
    std::vector<GradcheckRow> rows;
    for (size_t i = 0; i < checks.size(); ++i) {
        GradcheckRow row;
        row.name = checks[i].first;
        row.instances = instances;
        const auto t0 = std::chrono::steady_clock::now();
        Rng rng(derive_seed(seed, static_cast<uint64_t>(i)));
        for (int n = 0; n < instances; ++n) {
            row.max_rel_error = std::max(row.max_rel_error, checks[i].second(rng, rng.next()));
        }
        row.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        rows.push_back(row);
    }
    return rows;
}

}  // namespace evigrid
