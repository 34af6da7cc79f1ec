// SPDX-License-Identifier: Apache-2.0

#include "evigrid/model.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <memory>
#include <numeric>
#include <set>

#include "json.hpp"

#include "evigrid/parallel.hpp"
#include "evigrid/rng.hpp"

namespace evigrid::model {

using json = nlohmann::json;

// ---- config ------------------------------------------------------------------

void ModelConfig::validate() const {
    auto require = [](bool ok, const std::string& msg) {
        if (!ok) {
            throw ConfigError(msg);
        }
    };
    require(channels > 0, "model.channels must be positive");
    require(heads > 0 && channels % heads == 0, "model.heads must divide model.channels");
    require(layers >= 1, "model.layers must be >= 1");
    require(feature_dim >= 1, "model.feature_dim must be >= 1");
    require(max_frames >= 1, "model.max_frames must be >= 1");
    require(max_question >= 0, "model.max_question must be >= 0");
    require(max_events >= 1, "model.max_events must be >= 1");
    require(max_answer_len >= 1, "model.max_answer_len must be >= 1");
    vocab.validate();
}

size_t ModelConfig::expected_parameter_count() const {
    const size_t c = static_cast<size_t>(channels);
    const size_t f = static_cast<size_t>(feature_dim);
    const size_t v = static_cast<size_t>(vocab.size);
    const size_t p = static_cast<size_t>(max_positions());
    const size_t l = static_cast<size_t>(layers);
    return (f * c + c) + (v * c + p * c) + l * (2 * c + 12 * c * c + 5 * c) + (c + c * v) + (2 * c * c + 2 * c);
}

std::string config_to_json(const ModelConfig& cfg) {
    const Vocab& v = cfg.vocab;
    json j = {
        {"channels", cfg.channels},
        {"feature_dim", cfg.feature_dim},
        {"layers", cfg.layers},
        {"heads", cfg.heads},
        {"max_frames", cfg.max_frames},
        {"max_question", cfg.max_question},
        {"max_events", cfg.max_events},
        {"max_answer_len", cfg.max_answer_len},
        {"aggregate_semantics", cfg.aggregate_semantics},
        {"evidence_refs", cfg.evidence_refs},
        {"vocab",
         {{"size", v.size},
          {"bos", v.bos},
          {"eos", v.eos},
          {"evi", v.evi},
          {"evi_end", v.evi_end},
          {"find", v.find},
          {"word_a", v.word_a},
          {"word_and", v.word_and},
          {"concept_begin", v.concept_begin},
          {"num_concepts", v.num_concepts}}},
    };
    return j.dump();
}

ModelConfig config_from_json(const std::string& text) {
    ModelConfig cfg;
    try {
        const json j = json::parse(text);
        cfg.channels = j.at("channels");
        cfg.feature_dim = j.at("feature_dim");
        cfg.layers = j.at("layers");
        cfg.heads = j.at("heads");
        cfg.max_frames = j.at("max_frames");
        cfg.max_question = j.at("max_question");
        cfg.max_events = j.at("max_events");
        cfg.max_answer_len = j.at("max_answer_len");
        cfg.aggregate_semantics = j.at("aggregate_semantics");
        cfg.evidence_refs = j.at("evidence_refs");
        const json& v = j.at("vocab");
        cfg.vocab.size = v.at("size");
        cfg.vocab.bos = v.at("bos");
        cfg.vocab.eos = v.at("eos");
        cfg.vocab.evi = v.at("evi");
        cfg.vocab.evi_end = v.at("evi_end");
        cfg.vocab.find = v.at("find");
        cfg.vocab.word_a = v.at("word_a");
        cfg.vocab.word_and = v.at("word_and");
        cfg.vocab.concept_begin = v.at("concept_begin");
        cfg.vocab.num_concepts = v.at("num_concepts");
    } catch (const json::exception& e) {
        throw SchemaError(std::string("model config: ") + e.what());
    }
    cfg.validate();
    return cfg;
}

// ---- parameters ----------------------------------------------------------------

namespace {

std::string blk(int l, const std::string& name) { return "blk" + std::to_string(l) + "." + name; }
std::string head(int l, int h, const std::string& name) {
    return "blk" + std::to_string(l) + ".h" + std::to_string(h) + "." + name;
}

}  // namespace

ParamStore init_model(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    Rng rng(seed);
    const double bound = 1.0 / std::sqrt(static_cast<double>(cfg.channels));
    auto init = [&] { return rng.uniform(-bound, bound); };
    auto filled = [&](int r, int c) {
        Tensor t(r, c);
        for (double& v : t.data) {
            v = init();
        }
        return t;
    };
    const int c = cfg.channels;
    const int d = c / cfg.heads;
    ParamStore store;
    store.add("frame_proj.w", filled(cfg.feature_dim, c));
    store.add("frame_proj.b", Tensor(1, c));
    store.add("tok_emb", filled(cfg.vocab.size, c));
    store.add("pos_emb", filled(cfg.max_positions(), c));
    for (int l = 0; l < cfg.layers; ++l) {
        store.add(blk(l, "norm1"), Tensor(1, c, 1.0));
        for (int h = 0; h < cfg.heads; ++h) {
            store.add(head(l, h, "wq"), filled(c, d));
            store.add(head(l, h, "wk"), filled(c, d));
            store.add(head(l, h, "wv"), filled(c, d));
            store.add(head(l, h, "wo"), filled(d, c));
        }
        store.add(blk(l, "norm2"), Tensor(1, c, 1.0));
        store.add(blk(l, "mlp.w1"), filled(c, 4 * c));
        store.add(blk(l, "mlp.b1"), Tensor(1, 4 * c));
        store.add(blk(l, "mlp.w2"), filled(4 * c, c));
        store.add(blk(l, "mlp.b2"), Tensor(1, c));
    }
    store.add("final_norm", Tensor(1, c, 1.0));
    store.add("lm_head", filled(c, cfg.vocab.size));
    grounding::EvidenceProjection::add_params(store, c, init);
    return store;
}

// ---- decoder -------------------------------------------------------------------

namespace {

struct Block {
    Var norm1, norm2, w1, b1, w2, b2;
    std::vector<Var> wq, wk, wv, wo;
};

// Incremental causal decoder bound to one graph. Inputs arrive in segments;
// keys and values of earlier segments stay cached as graph nodes so later
// segments attend to them and gradients flow back through the cache.
class Decoder {
public:
    Decoder(Graph& g, ParamStore& store, const ModelConfig& cfg) : g_(g), cfg_(cfg) {
        frame_w_ = g.param(store, "frame_proj.w");
        frame_b_ = g.param(store, "frame_proj.b");
        tok_emb_ = g.param(store, "tok_emb");
        pos_emb_ = g.param(store, "pos_emb");
        for (int l = 0; l < cfg.layers; ++l) {
            Block b;
            b.norm1 = g.param(store, blk(l, "norm1"));
            b.norm2 = g.param(store, blk(l, "norm2"));
            b.w1 = g.param(store, blk(l, "mlp.w1"));
            b.b1 = g.param(store, blk(l, "mlp.b1"));
            b.w2 = g.param(store, blk(l, "mlp.w2"));
            b.b2 = g.param(store, blk(l, "mlp.b2"));
            for (int h = 0; h < cfg.heads; ++h) {
                b.wq.push_back(g.param(store, head(l, h, "wq")));
                b.wk.push_back(g.param(store, head(l, h, "wk")));
                b.wv.push_back(g.param(store, head(l, h, "wv")));
                b.wo.push_back(g.param(store, head(l, h, "wo")));
            }
            blocks_.push_back(std::move(b));
        }
        final_norm_ = g.param(store, "final_norm");
        lm_head_ = g.param(store, "lm_head");
        proj = grounding::EvidenceProjection::bind(g, store);
        keys_.assign(static_cast<size_t>(cfg.layers), std::vector<Var>(static_cast<size_t>(cfg.heads)));
        values_ = keys_;
    }

    Var positions(int first, int count) {
        std::vector<int> idx(static_cast<size_t>(count));
        std::iota(idx.begin(), idx.end(), first);
        return gather_rows(pos_emb_, idx);
    }

    Var frame_inputs(const Tensor& frames) {
        Var x = add(matmul(g_.constant(frames), frame_w_), frame_b_);
        return add(x, positions(0, frames.rows));
    }

    Var token_inputs(std::span<const int> tokens, int first_pos) {
        for (int t : tokens) {
            if (t < 0 || t >= cfg_.vocab.size) {
                throw InvariantError("token id " + std::to_string(t) + " outside the vocabulary");
            }
        }
        return add(gather_rows(tok_emb_, tokens), positions(first_pos, static_cast<int>(tokens.size())));
    }

    Var evidence_input(Var feature, int pos) {
        const int evi = cfg_.vocab.evi;
        return add(token_inputs(std::span<const int>(&evi, 1), pos), feature);
    }

    // Runs `inputs` (n×C) as the next n stream positions; returns their
    // final-normed hidden states.
    Var run(Var inputs) {
        const int n = inputs.rows();
        const int start = length_;
        if (start + n > cfg_.max_positions()) {
            throw LengthExceeded("stream of " + std::to_string(start + n) + " positions exceeds " +
                                 std::to_string(cfg_.max_positions()));
        }
        const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(cfg_.channels / cfg_.heads));
        Var x = inputs;
        for (size_t l = 0; l < blocks_.size(); ++l) {
            const Block& b = blocks_[l];
            Var h = mul(rmsnorm_rows(x), b.norm1);
            std::vector<Var> heads;
            for (size_t hd = 0; hd < b.wq.size(); ++hd) {
                Var q = matmul(h, b.wq[hd]);
                Var k = matmul(h, b.wk[hd]);
                Var v = matmul(h, b.wv[hd]);
                Var& kc = keys_[l][hd];
                Var& vc = values_[l][hd];
                if (kc.valid()) {
                    const Var kk[] = {kc, k};
                    const Var vv[] = {vc, v};
                    kc = concat_rows(kk);
                    vc = concat_rows(vv);
                } else {
                    kc = k;
                    vc = v;
                }
                Var attn = causal_softmax_rows(scale(matmul_nt(q, kc), inv_sqrt_d), start + 1);
                heads.push_back(matmul(matmul(attn, vc), b.wo[hd]));
            }
            Var mixed = heads[0];
            for (size_t hd = 1; hd < heads.size(); ++hd) {
                mixed = add(mixed, heads[hd]);
            }
            x = add(x, mixed);
            Var h2 = mul(rmsnorm_rows(x), b.norm2);
            x = add(x, add(matmul(gelu(add(matmul(h2, b.w1), b.b1)), b.w2), b.b2));
        }
        length_ += n;
        return mul(rmsnorm_rows(x), final_norm_);
    }

    Var logprobs(Var hidden) { return log_softmax_rows(matmul(hidden, lm_head_)); }

    int length() const { return length_; }

    grounding::EvidenceProjection proj;

private:
    Graph& g_;
    const ModelConfig& cfg_;
    Var frame_w_, frame_b_, tok_emb_, pos_emb_, final_norm_, lm_head_;
    std::vector<Block> blocks_;
    std::vector<std::vector<Var>> keys_, values_;
    int length_ = 0;
};

Var last_row(Var h) { return slice_rows(h, h.rows() - 1, 1); }

void check_inputs(const ModelConfig& cfg, const VideoFeatures& video, const std::vector<int>& question) {
    cfg.validate();
    video.validate();
    if (video.num_frames() > cfg.max_frames) {
        throw LengthExceeded("video has " + std::to_string(video.num_frames()) + " frames, limit " +
                             std::to_string(cfg.max_frames));
    }
    if (video.channels() != cfg.feature_dim) {
        throw ShapeError("video has " + std::to_string(video.channels()) + " channels, model expects " +
                         std::to_string(cfg.feature_dim));
    }
    if (static_cast<int>(question.size()) > cfg.max_question) {
        throw LengthExceeded("question has " + std::to_string(question.size()) + " tokens, limit " +
                             std::to_string(cfg.max_question));
    }
}

// Frames, <s> and the question as one segment.
Var run_prompt(Decoder& dec, const ModelConfig& cfg, const VideoFeatures& video, const std::vector<int>& question) {
    std::vector<int> prefix{cfg.vocab.bos};
    prefix.insert(prefix.end(), question.begin(), question.end());
    const Var parts[] = {dec.frame_inputs(video.frames), dec.token_inputs(prefix, video.num_frames())};
    return dec.run(concat_rows(parts));
}

}  // namespace

// ---- trace helpers ---------------------------------------------------------------

std::vector<Var> ForwardTrace::stage_features(Stage s) const {
    std::vector<Var> out;
    for (const auto& e : evidence) {
        if (e.stage == s) {
            out.push_back(e.feature);
        }
    }
    return out;
}

std::vector<Var> ForwardTrace::profiles() const {
    std::vector<Var> out;
    for (const auto& e : evidence) {
        out.push_back(e.profile.var);
    }
    return out;
}

std::vector<Interval> ForwardTrace::profile_targets() const {
    std::vector<Interval> out;
    for (const auto& e : evidence) {
        out.push_back(e.interval);
    }
    return out;
}

std::vector<int> response_tokens(const ResponseSequence& r, const Vocab& vocab) {
    std::vector<int> out(static_cast<size_t>(r.num_events()), vocab.evi);
    out.push_back(vocab.evi_end);
    for (const auto& part : r.answer_parts) {
        if (const auto* span = std::get_if<TextSpan>(&part)) {
            out.insert(out.end(), span->tokens.begin(), span->tokens.end());
        } else {
            out.push_back(vocab.evi);
        }
    }
    out.push_back(vocab.eos);
    return out;
}

ResponseSequence strip_evidence_refs(const ResponseSequence& r) {
    ResponseSequence out;
    out.grounding_slots = r.grounding_slots;
    std::vector<int> text = r.text_tokens();
    if (!text.empty()) {
        out.answer_parts.emplace_back(TextSpan{std::move(text)});
    }
    return out;
}

// ---- teacher-forced forward ---------------------------------------------------------

ForwardTrace forward_teacher_forced(Graph& g, ParamStore& store, const ModelConfig& cfg, const VideoFeatures& video,
                                    const std::vector<int>& question, const ResponseSequence& response,
                                    const std::vector<Interval>& intervals) {
    check_inputs(cfg, video, question);
    const int t_count = video.num_frames();
    const int k_count = response.num_events();
    for (const auto& v : response.violations()) {
        throw InvariantError("response: " + v);
    }
    if (k_count > cfg.max_events) {
        throw LengthExceeded(std::to_string(k_count) + " evidence slots, limit " + std::to_string(cfg.max_events));
    }
    if (static_cast<int>(intervals.size()) != k_count) {
        throw ArityMismatch(std::to_string(intervals.size()) + " intervals for " + std::to_string(k_count) +
                            " evidence slots");
    }
    for (const auto& iv : intervals) {
        if (!iv.valid_for(t_count)) {
            throw IntervalOutOfRange("interval [" + std::to_string(iv.start) + ", " + std::to_string(iv.end) +
                                     "] outside T=" + std::to_string(t_count));
        }
    }

    ForwardTrace trace;
    trace.targets = response_tokens(response, cfg.vocab);
    const int r_count = static_cast<int>(trace.targets.size());
    if (r_count - k_count - 1 > cfg.max_answer_len) {
        throw LengthExceeded("answer of " + std::to_string(r_count - k_count - 1) + " tokens exceeds " +
                             std::to_string(cfg.max_answer_len));
    }
    // Evidence (stage, slot) for every <evi> in the response, by token index.
    std::vector<std::pair<Stage, int>> evi_info(static_cast<size_t>(r_count), {Stage::Grounding, -1});
    for (int k = 0; k < k_count; ++k) {
        evi_info[static_cast<size_t>(k)] = {Stage::Grounding, k};
    }
    {
        int j = k_count + 1;
        for (const auto& part : response.answer_parts) {
            if (const auto* span = std::get_if<TextSpan>(&part)) {
                j += static_cast<int>(span->tokens.size());
            } else {
                evi_info[static_cast<size_t>(j++)] = {Stage::Answer, std::get<EvidenceRef>(part).index};
            }
        }
    }

    Decoder dec(g, store, cfg);
    const int p0 = t_count + 1 + static_cast<int>(question.size());
    std::vector<Var> segments{run_prompt(dec, cfg, video, question)};
    trace.frames = slice_rows(segments[0], 0, t_count);

    std::vector<Var> pending;
    auto flush = [&] {
        if (!pending.empty()) {
            segments.push_back(dec.run(concat_rows(pending)));
            pending.clear();
        }
    };
    // The final token (</s>) is only ever a target.
    for (int j = 0; j + 1 < r_count; ++j) {
        const int tok = trace.targets[static_cast<size_t>(j)];
        const int pos = p0 + j;
        if (tok != cfg.vocab.evi) {
            pending.push_back(dec.token_inputs(std::span<const int>(&tok, 1), pos));
            continue;
        }
        flush();
        EvidenceTrace ev;
        ev.stage = evi_info[static_cast<size_t>(j)].first;
        ev.slot = evi_info[static_cast<size_t>(j)].second;
        ev.position = pos;
        ev.interval = intervals[static_cast<size_t>(ev.slot)];
        ev.hidden = last_row(segments.back());
        ev.profile = grounding::frame_similarities(grounding::project_evidence(ev.hidden, dec.proj), trace.frames);
        ev.profile.source_slot = ev.slot;
        ev.profile.stage = ev.stage;
        ev.salient = grounding::select_salient(ev.profile, grounding::TrainSelect{ev.interval});
        ev.feature = cfg.aggregate_semantics ? grounding::aggregate_semantics(ev.hidden, trace.frames, ev.salient)
                                             : ev.hidden;
        pending.push_back(dec.evidence_input(ev.feature, pos));
        trace.evidence.push_back(std::move(ev));
    }
    flush();

    trace.hidden = segments.size() == 1 ? segments[0] : concat_rows(segments);
    trace.logprobs = dec.logprobs(slice_rows(trace.hidden, p0 - 1, r_count));
    return trace;
}

losses::LossBreakdown sample_loss(Graph& g, ParamStore& store, const ModelConfig& cfg, const LoadedSample& s,
                                  const losses::LossWeights& w) {
    const ResponseSequence response = cfg.evidence_refs ? s.ann.response : strip_evidence_refs(s.ann.response);
    const ForwardTrace tr = forward_teacher_forced(g, store, cfg, s.video, s.ann.question, response, s.ann.time_gt);
    const size_t n = tr.targets.size();
    const auto mask = std::make_unique<bool[]>(n);
    std::fill_n(mask.get(), n, true);
    Var sft = losses::loss_sft(tr.logprobs, tr.targets, std::span<const bool>(mask.get(), n));

    const std::vector<Var> profiles = tr.profiles();
    const std::vector<Interval> targets = tr.profile_targets();
    Var gnd = losses::loss_gnd(profiles, targets);

    Var cons;
    if (w.cons != 0.0) {
        std::vector<Var> s1;
        std::vector<Var> s2;
        const std::vector<Var> grounding_features = tr.stage_features(Stage::Grounding);
        for (const auto& e : tr.evidence) {
            if (e.stage == Stage::Answer) {
                s1.push_back(grounding_features[static_cast<size_t>(e.slot)]);
                s2.push_back(e.feature);
            }
        }
        if (!s1.empty()) {
            cons = losses::loss_cons(s1, s2);
        }
    }
    return losses::loss_total(sft, gnd, cons, w);
}

// ---- generation -------------------------------------------------------------------

namespace {

int argmax_allowed(const Tensor& row, const std::vector<bool>& allowed) {
    int best = -1;
    for (int t = 0; t < row.cols; ++t) {
        if (allowed[static_cast<size_t>(t)] && (best < 0 || row(0, t) > row(0, best))) {
            best = t;
        }
    }
    return best;
}

// Infer-mode grounding restricted to frames >= min_frame, which keeps
// stage-1 slots in temporal order.
std::pair<std::vector<int>, Interval> infer_interval(const grounding::SimilarityProfile& profile, int min_frame,
                                                     const grounding::GroundingConfig& gcfg) {
    grounding::SimilarityProfile view = profile;
    for (int t = 0; t < std::min(min_frame, view.num_frames()); ++t) {
        view.sims[static_cast<size_t>(t)] = 0.0;
    }
    std::vector<int> salient = grounding::select_salient(view, grounding::InferSelect{gcfg});
    const Interval iv = grounding::intervals_from_salient(salient, view, gcfg.interval_mode);
    return {std::move(salient), iv};
}

}  // namespace

GenerationResult generate(ParamStore& store, const ModelConfig& cfg, const VideoFeatures& video,
                          const std::vector<int>& question, const GenerateOptions& opts) {
    check_inputs(cfg, video, question);
    opts.grounding.validate();
    const Vocab& vocab = cfg.vocab;
    Graph g;
    Decoder dec(g, store, cfg);
    Var last = run_prompt(dec, cfg, video, question);
    const Var frames = slice_rows(last, 0, video.num_frames());
    last = last_row(last);

    GenerationResult out;
    std::vector<std::vector<int>> stage1_salient;

    auto ground = [&](Var hidden, int min_frame) {
        grounding::SimilarityProfile prof =
            grounding::frame_similarities(grounding::project_evidence(hidden, dec.proj), frames);
        return infer_interval(prof, min_frame, opts.grounding);
    };
    auto enrich = [&](Var hidden, const std::vector<int>& salient) {
        return cfg.aggregate_semantics ? grounding::aggregate_semantics(hidden, frames, salient) : hidden;
    };

    // Stage 1: evidence tokens until </evi>.
    while (true) {
        const Tensor lp = dec.logprobs(last).value();
        const bool full = out.response.num_events() >= cfg.max_events;
        const int pos = dec.length();
        if (full || lp(0, vocab.evi_end) > lp(0, vocab.evi)) {
            last = dec.run(dec.token_inputs(std::span<const int>(&vocab.evi_end, 1), pos));
            break;
        }
        const int min_frame = out.stage1_intervals.empty() ? 0 : out.stage1_intervals.back().start;
        auto [salient, iv] = ground(last, min_frame);
        Var feature = enrich(last, salient);
        out.response.grounding_slots.push_back(EvidenceSlot{iv, feature.value().data, Stage::Grounding});
        out.stage1_intervals.push_back(iv);
        stage1_salient.push_back(std::move(salient));
        last = dec.run(dec.evidence_input(feature, pos));
    }

    // Stage 2: interleaved text and evidence references until </s>.
    const int k_count = out.response.num_events();
    int refs = 0;
    int answer_len = 0;
    std::vector<bool> allowed(static_cast<size_t>(vocab.size), true);
    allowed[static_cast<size_t>(vocab.bos)] = false;
    allowed[static_cast<size_t>(vocab.evi_end)] = false;
    while (true) {
        if (answer_len >= cfg.max_answer_len) {
            out.truncated = true;
            break;
        }
        allowed[static_cast<size_t>(vocab.evi)] = cfg.evidence_refs && refs < k_count;
        const int tok = argmax_allowed(dec.logprobs(last).value(), allowed);
        ++answer_len;
        if (tok == vocab.eos) {
            break;
        }
        const int pos = dec.length();
        if (tok != vocab.evi) {
            if (out.response.answer_parts.empty() || !std::holds_alternative<TextSpan>(out.response.answer_parts.back())) {
                out.response.answer_parts.emplace_back(TextSpan{});
            }
            std::get<TextSpan>(out.response.answer_parts.back()).tokens.push_back(tok);
            last = dec.run(dec.token_inputs(std::span<const int>(&tok, 1), pos));
            continue;
        }
        const int slot = refs++;
        std::vector<int> salient = stage1_salient[static_cast<size_t>(slot)];
        Interval iv = out.stage1_intervals[static_cast<size_t>(slot)];
        if (opts.regrounding) {
            std::tie(salient, iv) = ground(last, 0);
            if (iv != out.stage1_intervals[static_cast<size_t>(slot)]) {
                ++out.regrounding_disagreements;
            }
        }
        Var feature = enrich(last, salient);
        out.response.answer_parts.emplace_back(EvidenceRef{slot, EvidenceSlot{iv, feature.value().data, Stage::Answer}});
        out.answer_intervals.push_back(iv);
        last = dec.run(dec.evidence_input(feature, pos));
    }

    out.final_intervals = out.stage1_intervals;
    // Answer references are emitted in slot order, so reference r is slot r.
    for (size_t r = 0; r < out.answer_intervals.size(); ++r) {
        out.final_intervals[r] = out.answer_intervals[r];
    }
    return out;
}

// ---- training -----------------------------------------------------------------------

TrainReport train(ParamStore& store, const ModelConfig& cfg, const std::vector<LoadedSample>& data,
                  const TrainConfig& tc) {
    if (data.empty()) {
        throw ConfigError("train: empty dataset");
    }
    if (tc.batch_size < 1 || tc.epochs < 0) {
        throw ConfigError("train: batch_size must be >= 1 and epochs >= 0");
    }
    const auto t0 = std::chrono::steady_clock::now();
    TrainReport report;
    Rng rng(tc.seed);
    std::vector<int> order(data.size());
    std::iota(order.begin(), order.end(), 0);
    const int64_t batches = (static_cast<int64_t>(data.size()) + tc.batch_size - 1) / tc.batch_size;
    const int64_t total_steps = batches * tc.epochs;
    store.zero_grad();
    for (int epoch = 1; epoch <= tc.epochs; ++epoch) {
        rng.shuffle(order.begin(), order.end());
        EpochReport er;
        er.epoch = epoch;
        for (size_t b = 0; b < order.size(); b += static_cast<size_t>(tc.batch_size)) {
            const size_t end = std::min(order.size(), b + static_cast<size_t>(tc.batch_size));
            const double inv = 1.0 / static_cast<double>(end - b);
            for (size_t i = b; i < end; ++i) {
                const LoadedSample& s = data[static_cast<size_t>(order[i])];
                LoadedSample jittered;
                const LoadedSample* use = &s;
                if (tc.feature_jitter > 0.0) {
                    jittered = s;
                    Rng noise(derive_seed(derive_seed(tc.seed, static_cast<uint64_t>(epoch)), s.ann.id));
                    for (double& x : jittered.video.frames.data) {
                        x += tc.feature_jitter * noise.normal();
                    }
                    use = &jittered;
                }
                Graph g;
                losses::LossBreakdown lb;
                try {
                    lb = sample_loss(g, store, cfg, *use, tc.weights);
                    g.backward(scale(lb.total_var, inv));
                } catch (const Error& e) {
                    e.rethrow_with_context("sample " + s.ann.id);
                }
                er.sft += lb.sft;
                er.gnd += lb.gnd;
                er.cons += lb.cons;
                er.total += lb.total;
            }
            AdamConfig adam = tc.adam;
            if (tc.lr_final_fraction != 1.0 && total_steps > 1) {
                const double frac = static_cast<double>(report.steps) / static_cast<double>(total_steps - 1);
                adam.lr *= 1.0 + (tc.lr_final_fraction - 1.0) * frac;
            }
            adam_step(store, adam);
            ++report.steps;
        }
        const double n = static_cast<double>(data.size());
        er.sft /= n;
        er.gnd /= n;
        er.cons /= n;
        er.total /= n;
        if (!std::isfinite(er.total)) {
            throw NonFiniteError("epoch " + std::to_string(epoch) + " mean loss is not finite");
        }
        if (tc.progress != nullptr) {
            *tc.progress << "epoch " << epoch << "\tsft " << er.sft << "\tgnd " << er.gnd << "\tcons " << er.cons
                         << "\ttotal " << er.total << std::endl;
        }
        report.epochs.push_back(er);
    }
    report.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return report;
}

// ---- toy data -------------------------------------------------------------------------

void ToyConfig::validate(const Vocab& vocab) const {
    auto require = [](bool ok, const std::string& msg) {
        if (!ok) {
            throw ConfigError(msg);
        }
    };
    require(min_frames >= 1, "data.min_frames must be >= 1");
    require(max_frames >= min_frames, "data.max_frames must be >= data.min_frames");
    require(feature_dim >= 1, "data.feature_dim must be >= 1");
    require(num_concepts >= 1 && num_concepts <= vocab.num_concepts,
            "data.num_concepts must lie in [1, " + std::to_string(vocab.num_concepts) + "]");
    require(min_events >= 1, "data.min_events must be >= 1");
    require(max_events >= min_events, "data.max_events must be >= data.min_events");
    require(max_distractors >= 0, "data.max_distractors must be >= 0");
    require(max_events + max_distractors <= num_concepts,
            "data.max_events + data.max_distractors exceeds data.num_concepts (events need distinct concepts)");
    require(min_event_len >= 1, "data.min_event_len must be >= 1");
    require(max_event_len >= min_event_len, "data.max_event_len must be >= data.min_event_len");
    require(noise >= 0.0, "data.noise must be >= 0");
    const int most = max_events + max_distractors;
    require(most * max_event_len + (most - 1) <= min_frames,
            "data.max_events: " + std::to_string(most) + " events of up to " + std::to_string(max_event_len) +
                " frames cannot fit in " + std::to_string(min_frames) + " frames");
}

std::vector<std::vector<double>> concept_table(const ToyConfig& cfg) {
    Rng rng(cfg.concept_seed);
    std::vector<std::vector<double>> out;
    for (int c = 0; c < cfg.num_concepts; ++c) {
        std::vector<double> v(static_cast<size_t>(cfg.feature_dim));
        double norm = 0.0;
        for (double& x : v) {
            x = rng.normal();
            norm += x * x;
        }
        norm = std::sqrt(norm);
        for (double& x : v) {
            x /= norm;
        }
        out.push_back(std::move(v));
    }
    return out;
}

LoadedSample make_toy_sample(const ToyConfig& cfg, const Vocab& vocab, uint64_t seed, int index,
                             const std::string& id) {
    cfg.validate(vocab);
    const auto concepts = concept_table(cfg);
    Rng rng(derive_seed(seed, static_cast<uint64_t>(index)));
    const int t_count = rng.uniform_int(cfg.min_frames, cfg.max_frames);
    const int e_count = rng.uniform_int(cfg.min_events, cfg.max_events);
    const int d_count = rng.uniform_int(0, cfg.max_distractors);
    const int n_count = e_count + d_count;
    std::vector<int> lens;
    int used = 0;
    for (int e = 0; e < n_count; ++e) {
        lens.push_back(rng.uniform_int(cfg.min_event_len, cfg.max_event_len));
        used += lens.back();
    }
    // Events keep at least one background frame between them.
    const int slack = t_count - used - (n_count - 1);
    std::vector<int> offsets;
    for (int e = 0; e < n_count; ++e) {
        offsets.push_back(rng.uniform_int(0, slack));
    }
    std::sort(offsets.begin(), offsets.end());
    std::vector<Interval> placed;
    int base = 0;
    for (int e = 0; e < n_count; ++e) {
        const int start = base + offsets[static_cast<size_t>(e)];
        placed.push_back({start, start + lens[static_cast<size_t>(e)] - 1});
        base += lens[static_cast<size_t>(e)] + 1;
    }
    std::vector<int> ids(static_cast<size_t>(cfg.num_concepts));
    std::iota(ids.begin(), ids.end(), 0);
    rng.shuffle(ids.begin(), ids.end());
    ids.resize(static_cast<size_t>(n_count));
    // Which placed events the question asks about, kept in temporal order.
    std::vector<int> which(static_cast<size_t>(n_count));
    std::iota(which.begin(), which.end(), 0);
    rng.shuffle(which.begin(), which.end());
    which.resize(static_cast<size_t>(e_count));
    std::sort(which.begin(), which.end());

    Tensor frames(t_count, cfg.feature_dim);
    for (double& x : frames.data) {
        x = cfg.noise * rng.normal();
    }
    for (int e = 0; e < n_count; ++e) {
        const auto& dir = concepts[static_cast<size_t>(ids[static_cast<size_t>(e)])];
        for (int t = placed[static_cast<size_t>(e)].start; t <= placed[static_cast<size_t>(e)].end; ++t) {
            for (int c = 0; c < cfg.feature_dim; ++c) {
                frames(t, c) += cfg.signal * dir[static_cast<size_t>(c)];
            }
        }
    }

    LoadedSample s;
    s.video = VideoFeatures{std::move(frames), 1.0};
    s.ann.id = id;
    s.ann.video = s.video;
    std::vector<Interval> intervals;
    std::vector<int> asked;
    EventTexts texts;
    for (int e : which) {
        const int tok = vocab.concept_begin + ids[static_cast<size_t>(e)];
        intervals.push_back(placed[static_cast<size_t>(e)]);
        asked.push_back(tok);
        texts.per_event.push_back({vocab.word_a, tok});
    }
    if (!cfg.ordered_question) {
        rng.shuffle(asked.begin(), asked.end());
    }
    s.ann.question.push_back(vocab.find);
    for (size_t i = 0; i < asked.size(); ++i) {
        if (i > 0) {
            s.ann.question.push_back(vocab.word_and);
        }
        s.ann.question.push_back(asked[i]);
    }
    s.ann.response = build_response(intervals, texts);
    s.ann.time_gt = intervals;
    std::set<int> used_tokens(s.ann.question.begin(), s.ann.question.end());
    for (int tok : s.ann.response.text_tokens()) {
        used_tokens.insert(tok);
    }
    for (int tok : {vocab.bos, vocab.eos, vocab.evi, vocab.evi_end}) {
        used_tokens.insert(tok);
    }
    for (int tok : used_tokens) {
        s.ann.vocab_hint[std::to_string(tok)] = vocab.display(tok);
    }
    return s;
}

std::vector<LoadedSample> make_toy_dataset(int n, const ToyConfig& cfg, const Vocab& vocab, uint64_t seed,
                                           int first_index, const std::string& id_prefix) {
    cfg.validate(vocab);
    std::vector<LoadedSample> out(static_cast<size_t>(std::max(n, 0)));
    parallel_for(n, [&](int i) {
        char buf[16];
        std::snprintf(buf, sizeof buf, "%05d", first_index + i);
        out[static_cast<size_t>(i)] = make_toy_sample(cfg, vocab, seed, first_index + i, id_prefix + buf);
    });
    return out;
}

}  // namespace evigrid::model
