#include <algorithm>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "evigrid/errors.hpp"
#include "evigrid/eval.hpp"
#include "evigrid/model.hpp"
#include "evigrid/rng.hpp"

using namespace evigrid;
using namespace evigrid::model;

namespace {

VideoFeatures random_video(Rng& rng, int frames, int dim) {
    VideoFeatures v;
    v.frames = Tensor(frames, dim);
    for (double& x : v.frames.data) x = rng.normal();
    return v;
}

bool stores_equal(const ParamStore& a, const ParamStore& b) {
    if (a.params().size() != b.params().size()) return false;
    for (const auto& [name, p] : a.params()) {
        auto it = b.params().find(name);
        if (it == b.params().end() || it->second.value.data != p.value.data) return false;
    }
    return true;
}

}  // namespace

TEST_CASE("config validation") {
    ModelConfig c;
    CHECK_NOTHROW(c.validate());
    c.heads = 3;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = ModelConfig{};
    c.vocab.evi = c.vocab.eos;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = ModelConfig{};
    c.vocab.find = c.vocab.size;
    CHECK_THROWS_AS(c.validate(), ConfigError);
    c = ModelConfig{};
    c.aggregate_semantics = false;
    CHECK(config_from_json(config_to_json(c)).aggregate_semantics == false);
}

TEST_CASE("initialization") {
    const ModelConfig cfg;
    const ParamStore a = init_model(cfg, 1);
    const ParamStore b = init_model(cfg, 1);
    const ParamStore c = init_model(cfg, 2);
    CHECK(stores_equal(a, b));
    CHECK_FALSE(stores_equal(a, c));
    // Hand count for C=32, F=32, V=64, L=2, P=74.
    const size_t frame = 32 * 32 + 32;
    const size_t embed = 64 * 32 + 74 * 32;
    const size_t block = 2 * 32 + 4 * 32 * 32 + 8 * 32 * 32 + 5 * 32;
    const size_t head = 32 + 32 * 64;
    const size_t evi = 2 * 32 * 32 + 2 * 32;
    CHECK(cfg.max_positions() == 74);
    CHECK(frame + embed + 2 * block + head + evi == 34688);
    CHECK(a.parameter_count() == 34688);
    CHECK(cfg.expected_parameter_count() == 34688);
}

TEST_CASE("teacher-forced forward") {
    const ModelConfig cfg;
    ParamStore store = init_model(cfg, 3);
    const ToyConfig toy;
    const LoadedSample s = make_toy_sample(toy, cfg.vocab, 1, 4, "x");

    SUBCASE("one profile per evidence token with stage tags") {
        Graph g;
        const auto tr = forward_teacher_forced(g, store, cfg, s.video, s.ann.question, s.ann.response, s.ann.time_gt);
        const int k = s.ann.response.num_events();
        CHECK(tr.stage_features(Stage::Grounding).size() == static_cast<size_t>(k));
        CHECK(tr.stage_features(Stage::Answer).size() == s.ann.response.ref_indices().size());
        CHECK(tr.profiles().size() == tr.evidence.size());
        CHECK(tr.logprobs.value().rows == static_cast<int>(response_tokens(s.ann.response, cfg.vocab).size()));
        for (const auto& ev : tr.evidence) {
            std::vector<int> want(static_cast<size_t>(ev.interval.length()));
            std::iota(want.begin(), want.end(), ev.interval.start);
            CHECK(ev.salient == want);
        }
    }
    SUBCASE("zero events is a plain language model pass") {
        ResponseSequence r;
        r.answer_parts.emplace_back(TextSpan{{cfg.vocab.word_a}});
        Graph g;
        const auto tr = forward_teacher_forced(g, store, cfg, s.video, s.ann.question, r, {});
        CHECK(tr.evidence.empty());
        CHECK(tr.profiles().empty());
        CHECK(tr.logprobs.value().rows == 3);  // </evi> a </s>
    }
    SUBCASE("evidence features pool only the claimed frames") {
        // Frames are processed by the decoder before pooling, so the check
        // zeroes processed states outside the interval.
        Graph g;
        const auto tr = forward_teacher_forced(g, store, cfg, s.video, s.ann.question, s.ann.response, s.ann.time_gt);
        for (const auto& ev : tr.evidence) {
            Tensor masked = tr.frames.value();
            for (int t = 0; t < masked.rows; ++t) {
                if (ev.interval.contains(t)) continue;
                for (int c = 0; c < masked.cols; ++c) masked(t, c) = 0.0;
            }
            Graph h;
            const Var f = grounding::aggregate_semantics(h.constant(ev.hidden.value()), h.constant(masked), ev.salient);
            CHECK(f.value().data == ev.feature.value().data);
        }
    }
    SUBCASE("later tokens never influence earlier log-probabilities") {
        Graph g1, g2;
        ResponseSequence changed = s.ann.response;
        auto& last_text = std::get<TextSpan>(changed.answer_parts.front());
        last_text.tokens.back() = cfg.vocab.word_and;
        const auto a = forward_teacher_forced(g1, store, cfg, s.video, s.ann.question, s.ann.response, s.ann.time_gt);
        const auto b = forward_teacher_forced(g2, store, cfg, s.video, s.ann.question, changed, s.ann.time_gt);
        const auto toks_a = response_tokens(s.ann.response, cfg.vocab);
        const auto toks_b = response_tokens(changed, cfg.vocab);
        size_t first_diff = 0;
        while (toks_a[first_diff] == toks_b[first_diff]) ++first_diff;
        const Tensor& la = a.logprobs.value();
        const Tensor& lb = b.logprobs.value();
        // row j predicts token j from tokens < j, so rows up to first_diff agree
        for (size_t j = 0; j <= first_diff; ++j) {
            for (int v = 0; v < la.cols; ++v) CHECK(la(static_cast<int>(j), v) == lb(static_cast<int>(j), v));
        }
    }
    SUBCASE("interval arity must match the slots") {
        Graph g;
        CHECK_THROWS_AS(forward_teacher_forced(g, store, cfg, s.video, s.ann.question, s.ann.response, {}),
                        ArityMismatch);
    }
}

TEST_CASE("generation is structurally valid and deterministic") {
    const ModelConfig cfg;
    ParamStore store = init_model(cfg, 5);
    Rng rng(77);
    for (int i = 0; i < 100; ++i) {
        const int frames = rng.uniform_int(1, cfg.max_frames);
        const VideoFeatures v = random_video(rng, frames, cfg.feature_dim);
        std::vector<int> q{cfg.vocab.find};
        const int n = rng.uniform_int(0, cfg.max_question - 1);
        for (int j = 0; j < n; ++j) q.push_back(rng.uniform_int(cfg.vocab.find, cfg.vocab.size - 1));
        const GenerationResult r = generate(store, cfg, v, q);
        CHECK(r.response.violations().empty());
        CHECK(r.stage1_intervals.size() == static_cast<size_t>(r.response.num_events()));
        CHECK(r.final_intervals.size() == r.stage1_intervals.size());
        CHECK(r.answer_intervals.size() == r.response.ref_indices().size());
        for (size_t k = 0; k < r.stage1_intervals.size(); ++k) {
            CHECK(r.stage1_intervals[k].valid_for(frames));
            if (k > 0) CHECK(r.stage1_intervals[k - 1].start <= r.stage1_intervals[k].start);
        }
        for (int t : r.response.text_tokens()) {
            CHECK_FALSE(t == cfg.vocab.evi);
            CHECK_FALSE(t == cfg.vocab.evi_end);
        }
        if (i < 10) {
            const GenerationResult again = generate(store, cfg, v, q);
            CHECK(again.response == r.response);
            CHECK(again.final_intervals == r.final_intervals);
        }
    }
}

TEST_CASE("input limits") {
    const ModelConfig cfg;
    ParamStore store = init_model(cfg, 5);
    Rng rng(1);
    CHECK_THROWS_AS(generate(store, cfg, random_video(rng, cfg.max_frames + 1, cfg.feature_dim), {4}),
                    LengthExceeded);
    CHECK_THROWS_AS(generate(store, cfg, random_video(rng, 4, cfg.feature_dim + 1), {4}), Error);
    CHECK_THROWS_AS(generate(store, cfg, random_video(rng, 4, cfg.feature_dim), std::vector<int>(9, 4)),
                    LengthExceeded);
}

TEST_CASE("training") {
    const ModelConfig cfg;
    const ToyConfig toy;
    SUBCASE("one sample overfits") {
        ParamStore store = init_model(cfg, 1);
        const auto data = make_toy_dataset(1, toy, cfg.vocab, 3);
        TrainConfig tc;
        tc.epochs = 200;
        tc.feature_jitter = 0.0;
        const auto rep = train(store, cfg, data, tc);
        REQUIRE(rep.epochs.size() == 200);
        CHECK(rep.steps == 200);
        CHECK(rep.epochs.back().total <= 0.5 * rep.epochs.front().total);
    }
    SUBCASE("zero learning rate leaves losses unchanged") {
        ParamStore store = init_model(cfg, 1);
        const ParamStore before = store;
        const auto data = make_toy_dataset(4, toy, cfg.vocab, 3);
        TrainConfig tc;
        tc.epochs = 3;
        tc.adam.lr = 0.0;
        tc.feature_jitter = 0.0;
        const auto rep = train(store, cfg, data, tc);
        for (const auto& e : rep.epochs) CHECK(e.total == rep.epochs.front().total);
        CHECK(stores_equal(store, before));
    }
    SUBCASE("fixed seed reproduces the report") {
        const auto data = make_toy_dataset(6, toy, cfg.vocab, 3);
        TrainConfig tc;
        tc.epochs = 2;
        tc.batch_size = 4;
        ParamStore a = init_model(cfg, 1);
        ParamStore b = init_model(cfg, 1);
        const auto ra = train(a, cfg, data, tc);
        const auto rb = train(b, cfg, data, tc);
        REQUIRE(ra.epochs.size() == rb.epochs.size());
        for (size_t i = 0; i < ra.epochs.size(); ++i) CHECK(ra.epochs[i].total == rb.epochs[i].total);
        CHECK(stores_equal(a, b));
    }
    SUBCASE("events are required") {
        ParamStore store = init_model(cfg, 1);
        auto data = make_toy_dataset(1, toy, cfg.vocab, 3);
        data[0].ann.response = strip_evidence_refs(data[0].ann.response);
        data[0].ann.response.grounding_slots.clear();
        data[0].ann.time_gt.clear();
        CHECK_THROWS_AS(train(store, cfg, data, TrainConfig{}), Error);
    }
}

TEST_CASE("toy generator") {
    const Vocab vocab;
    SUBCASE("a single planted event") {
        ToyConfig toy;
        toy.num_concepts = 1;
        toy.max_events = 1;
        toy.max_distractors = 0;
        const auto s = make_toy_sample(toy, vocab, 1, 0, "one");
        REQUIRE(s.ann.response.num_events() == 1);
        REQUIRE(s.ann.time_gt.size() == 1);
        const auto dir = concept_table(toy)[0];
        const Interval gt = s.ann.time_gt[0];
        for (int t = 0; t < s.video.num_frames(); ++t) {
            double dot = 0.0;
            for (int c = 0; c < toy.feature_dim; ++c) dot += s.video.frames(t, c) * dir[static_cast<size_t>(c)];
            CHECK((dot > 0.5) == gt.contains(t));
        }
        CHECK(s.ann.question == std::vector<int>{vocab.find, vocab.concept_begin});
    }
    SUBCASE("events never overlap and samples are reproducible") {
        const ToyConfig toy;
        for (int i = 0; i < 1000; ++i) {
            const auto s = make_toy_sample(toy, vocab, 9, i, "s");
            CHECK(s.ann.response.violations().empty());
            for (size_t a = 0; a < s.ann.time_gt.size(); ++a)
                for (size_t b = a + 1; b < s.ann.time_gt.size(); ++b)
                    CHECK_FALSE(s.ann.time_gt[a].overlaps(s.ann.time_gt[b]));
            if (i < 20) CHECK(make_toy_sample(toy, vocab, 9, i, "s").ann == s.ann);
        }
    }
    SUBCASE("thresholding against the concept direction recovers the events") {
        // Oracle that knows the concept directions; calibrates the noise level.
        const ToyConfig toy;
        const auto dirs = concept_table(toy);
        double iou_sum = 0.0;
        int n = 0;
        for (int i = 0; i < 300; ++i) {
            const auto s = make_toy_sample(toy, vocab, 13, i, "o");
            const auto texts = split_event_texts(s.ann.response).per_event;
            for (size_t k = 0; k < texts.size(); ++k) {
                const auto& dir = dirs[static_cast<size_t>(texts[k].back() - vocab.concept_begin)];
                int best_len = 0, best_start = 0, run = 0;
                for (int t = 0; t <= s.video.num_frames(); ++t) {
                    double dot = -1.0;
                    if (t < s.video.num_frames()) {
                        dot = 0.0;
                        for (int c = 0; c < toy.feature_dim; ++c) dot += s.video.frames(t, c) * dir[static_cast<size_t>(c)];
                    }
                    if (dot > 0.5) {
                        ++run;
                    } else {
                        if (run > best_len) {
                            best_len = run;
                            best_start = t - run;
                        }
                        run = 0;
                    }
                }
                const Interval pred = best_len == 0 ? Interval{0, 0} : Interval{best_start, best_start + best_len - 1};
                iou_sum += eval::iou(pred, s.ann.time_gt[k]);
                ++n;
            }
        }
        CHECK(iou_sum / n >= 0.9);
    }
    SUBCASE("configurations that cannot fit are rejected") {
        ToyConfig toy;
        toy.max_events = 6;
        toy.max_distractors = 2;
        CHECK_THROWS_AS(toy.validate(vocab), ConfigError);
    }
}
