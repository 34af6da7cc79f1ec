// SPDX-License-Identifier: Apache-2.0

#include "evigrid/fpo.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>
#include <ostream>
#include <string>

#include "evigrid/rng.hpp"

namespace evigrid::fpo {

void FpoConfig::validate() const {
    if (!(beta > 0.0) || !std::isfinite(beta)) {
        throw ConfigError("fpo.beta must be a positive number, got " + std::to_string(beta));
    }
    if (use_reference != (reference != nullptr)) {
        throw ConfigError("fpo.use_reference requires a reference checkpoint, and only then");
    }
}

namespace {

void check_interval(const Interval& iv, int t_count) {
    if (!iv.valid_for(t_count)) {
        throw IntervalOutOfRange("interval [" + std::to_string(iv.start) + ", " + std::to_string(iv.end) +
                                 "] outside T=" + std::to_string(t_count));
    }
}

}  // namespace

Var grounding_logprob(Var sims, const Interval& interval) {
    if (sims.cols() != 1) {
        throw ShapeError("grounding_logprob expects a T×1 similarity column");
    }
    const int t_count = sims.rows();
    check_interval(interval, t_count);
    Tensor sign(t_count, 1);
    Tensor offset(t_count, 1);
    for (int t = 0; t < t_count; ++t) {
        const bool inside = interval.contains(t);
        sign(t, 0) = inside ? 1.0 : -1.0;
        offset(t, 0) = inside ? 0.0 : 1.0;
    }
    Graph& g = *sims.graph;
    Var p = add(mul(sims, g.constant(sign)), g.constant(offset));
    return sum(log_clamped(p, kProbEps, 1.0 - kProbEps));
}

double grounding_logprob(std::span<const double> sims, const Interval& interval) {
    const int t_count = static_cast<int>(sims.size());
    check_interval(interval, t_count);
    double total = 0.0;
    for (int t = 0; t < t_count; ++t) {
        const double s = sims[static_cast<size_t>(t)];
        const double p = interval.contains(t) ? s : 1.0 - s;
        total += std::log(std::clamp(p, kProbEps, 1.0 - kProbEps));
    }
    return total;
}

ResponseLogProb response_logprob(const model::ForwardTrace& trace, const ResponseSequence& response,
                                 const std::vector<Interval>& claimed) {
    const int k_count = response.num_events();
    if (static_cast<int>(claimed.size()) != k_count) {
        throw ArityMismatch(std::to_string(claimed.size()) + " claimed intervals for " + std::to_string(k_count) +
                            " evidence slots");
    }
    const size_t expected = static_cast<size_t>(k_count) + response.ref_indices().size();
    if (trace.evidence.size() != expected) {
        throw ArityMismatch("trace has " + std::to_string(trace.evidence.size()) + " evidence tokens, response has " +
                            std::to_string(expected));
    }
    Graph& g = *trace.logprobs.graph;
    ResponseLogProb out;
    out.text_var = sum(pick(trace.logprobs, trace.targets));
    std::vector<Var> parts;
    for (const auto& e : trace.evidence) {
        parts.push_back(grounding_logprob(e.profile.var, claimed[static_cast<size_t>(e.slot)]));
    }
    out.grounding_var = parts.empty() ? g.constant(Tensor::scalar(0.0)) : sum(concat_rows(parts));
    out.total_var = add(out.text_var, out.grounding_var);
    out.text_term = out.text_var.item();
    out.grounding_term = out.grounding_var.item();
    out.total = out.total_var.item();
    return out;
}

Var fpo_loss(const ResponseLogProb& pref, const ResponseLogProb& dispref, const FpoConfig& cfg, double ref_pref,
             double ref_dispref) {
    Var margin = affine(sub(pref.total_var, dispref.total_var), 1.0, -(ref_pref - ref_dispref));
    return scale(log_sigmoid(scale(margin, cfg.beta)), -1.0);
}

double fpo_loss_value(double pref_total, double dispref_total, const FpoConfig& cfg) {
    Graph g;
    Var m = g.constant(Tensor::scalar(cfg.beta * (pref_total - dispref_total)));
    return -log_sigmoid(m).item();
}

namespace {

ResponseLogProb score_response(Graph& g, ParamStore& store, const model::ModelConfig& mcfg,
                               const model::LoadedSample& base, const ScoredResponse& r) {
    const model::ForwardTrace tr =
        model::forward_teacher_forced(g, store, mcfg, base.video, base.ann.question, r.response, r.intervals);
    return response_logprob(tr, r.response, r.intervals);
}

}  // namespace

PairScore pair_loss(Graph& g, ParamStore& store, const model::ModelConfig& mcfg, const model::LoadedSample& base,
                    const PreferencePair& pair, const FpoConfig& cfg, Var* loss_out) {
    cfg.validate();
    const ResponseLogProb pref = score_response(g, store, mcfg, base, pair.preferred);
    const ResponseLogProb dispref = score_response(g, store, mcfg, base, pair.dispreferred);
    double ref_pref = 0.0;
    double ref_dispref = 0.0;
    if (cfg.use_reference) {
        // The reference store is only read: no backward pass runs on this graph.
        auto& ref = const_cast<ParamStore&>(*cfg.reference);
        Graph rg;
        ref_pref = score_response(rg, ref, mcfg, base, pair.preferred).total;
        ref_dispref = score_response(rg, ref, mcfg, base, pair.dispreferred).total;
    }
    Var loss = fpo_loss(pref, dispref, cfg, ref_pref, ref_dispref);
    if (loss_out != nullptr) {
        *loss_out = loss;
    }
    PairScore s;
    s.loss = loss.item();
    s.margin = pref.total - dispref.total;
    s.text_margin = pref.text_term - dispref.text_term;
    s.grounding_margin = pref.grounding_term - dispref.grounding_term;
    return s;
}

PairScore score_pair(ParamStore& store, const model::ModelConfig& mcfg, const model::LoadedSample& base,
                     const PreferencePair& pair, const FpoConfig& cfg) {
    Graph g;
    return pair_loss(g, store, mcfg, base, pair, cfg, nullptr);
}

PairScore fpo_step(ParamStore& store, const model::ModelConfig& mcfg, const model::LoadedSample& base,
                   const PreferencePair& pair, const FpoConfig& cfg, const OptimizerConfig& opt) {
    Graph g;
    Var loss;
    const PairScore s = pair_loss(g, store, mcfg, base, pair, cfg, &loss);
    store.zero_grad();
    g.backward(loss);
    optimizer_step(store, opt);
    return s;
}

FpoTrainReport train_fpo(ParamStore& store, const model::ModelConfig& mcfg, const std::vector<PairExample>& data,
                         const FpoTrainConfig& tc, std::ostream* log) {
    tc.fpo.validate();
    if (tc.steps > 0 && data.empty()) {
        throw ConfigError("fpo: no preference pairs to train on");
    }
    if (tc.batch_size < 1) {
        throw ConfigError("fpo.batch_size must be >= 1");
    }
    const auto t0 = std::chrono::steady_clock::now();
    FpoTrainReport report;
    Rng rng(tc.seed);
    std::vector<int> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    size_t cursor = order.size();
    store.zero_grad();
    for (int step = 1; step <= tc.steps; ++step) {
        PairScore mean;
        const int b = std::min<int>(tc.batch_size, static_cast<int>(data.size()));
        for (int i = 0; i < b; ++i) {
            if (cursor == order.size()) {
                rng.shuffle(order.begin(), order.end());
                cursor = 0;
            }
            const PairExample& ex = data[static_cast<size_t>(order[cursor++])];
            Graph g;
            Var loss;
            PairScore s;
            try {
                s = pair_loss(g, store, mcfg, *ex.base, ex.pair, tc.fpo, &loss);
                if (tc.sft_weight > 0.0) {
                    const auto lb = model::sample_loss(g, store, mcfg, *ex.base, tc.sft_terms);
                    loss = add(loss, scale(lb.total_var, tc.sft_weight));
                }
            } catch (const Error& e) {
                e.rethrow_with_context("pair for " + ex.pair.base_id);
            }
            g.backward(scale(loss, 1.0 / b));
            mean.loss += s.loss / b;
            mean.margin += s.margin / b;
            mean.text_margin += s.text_margin / b;
            mean.grounding_margin += s.grounding_margin / b;
        }
        optimizer_step(store, tc.optimizer);
        if (log != nullptr) {
            *log << step << '\t' << mean.loss << '\t' << mean.margin << '\t' << mean.text_margin << '\t'
                 << mean.grounding_margin << '\n';
        }
        report.steps.push_back(mean);
    }
    report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

}  // namespace evigrid::fpo
