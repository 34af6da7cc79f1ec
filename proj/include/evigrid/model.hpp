// SPDX-License-Identifier: Apache-2.0
//
// Compact causal decoder over a mixed stream
//
//   [frame_0 .. frame_{T-1}] <s> question... <evi>×K </evi> answer... </s>
//
// Frames enter as projected feature vectors. Whenever an evidence token is
// emitted, the hidden state that emitted it is projected into a query, scored
// against the processed frame states, and (by default) enriched with the mean
// of the salient frames. The enriched feature is added to the <evi> input
// embedding, so the evidence token carries event semantics forward.
//
// Parameter count for a config with channels C, feature width F, vocab V,
// L layers and P = max_positions():
//
//   F·C + C            frame projection
//   V·C + P·C          token and position embeddings
//   L·(2C + 4C² + 8C² + 5C)   per block: two norms, attention (q,k,v,o), MLP C→4C→C
//   C + C·V            final norm and LM head
//   2C² + 2C           evidence projection
//
// For the default config (C=32, F=32, V=64, L=2, P=74) this is 34,688.

#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "evigrid/autograd.hpp"
#include "evigrid/domain.hpp"
#include "evigrid/grounding.hpp"
#include "evigrid/losses.hpp"

namespace evigrid::model {

struct ModelConfig {
    int channels = 32;
    int feature_dim = 32;
    int layers = 2;
    int heads = 2;
    int max_frames = 32;
    int max_question = 8;
    int max_events = 8;
    int max_answer_len = 24;  // answer tokens including </s>
    Vocab vocab;
    // Ablation switches; persisted with checkpoints.
    bool aggregate_semantics = true;
    bool evidence_refs = true;

    int max_positions() const { return max_frames + 1 + max_question + max_events + 1 + max_answer_len; }
    void validate() const;  // throws ConfigError
    size_t expected_parameter_count() const;
};

std::string config_to_json(const ModelConfig& cfg);
ModelConfig config_from_json(const std::string& text);

ParamStore init_model(const ModelConfig& cfg, uint64_t seed);

struct EvidenceTrace {
    Stage stage = Stage::Grounding;
    int slot = 0;       // stage-1 slot this evidence refers to
    int position = 0;   // stream position of the <evi> input
    Interval interval;  // interval whose frames were pooled
    std::vector<int> salient;
    grounding::SimilarityProfile profile;
    Var hidden;   // 1×C state that emitted the token
    Var feature;  // 1×C enriched evidence feature
};

struct ForwardTrace {
    Var logprobs;              // R×V, row j predicts response token j
    std::vector<int> targets;  // R response token ids
    Var hidden;                // N×C final states for every input position
    Var frames;                // T×C processed frame states
    std::vector<EvidenceTrace> evidence;

    std::vector<Var> stage_features(Stage s) const;
    std::vector<Var> profiles() const;
    std::vector<Interval> profile_targets() const;
};

// Flattens a response into token ids: <evi>×K </evi> answer... </s>.
std::vector<int> response_tokens(const ResponseSequence& r, const Vocab& vocab);

// Replaces every answer reference with nothing, leaving a pure-text answer.
ResponseSequence strip_evidence_refs(const ResponseSequence& r);

// Teacher-forced pass over one response. `intervals` are the intervals the
// response claims (one per grounding slot); their frames are the salient set
// for every evidence token of that slot.
ForwardTrace forward_teacher_forced(Graph& g, ParamStore& store, const ModelConfig& cfg,
                                    const VideoFeatures& video, const std::vector<int>& question,
                                    const ResponseSequence& response, const std::vector<Interval>& intervals);

struct LoadedSample {
    AnnotationSample ann;
    VideoFeatures video;
};

// Eq.-2 style objective for one sample (components per LossWeights; a zero
// consistency weight drops the term).
losses::LossBreakdown sample_loss(Graph& g, ParamStore& store, const ModelConfig& cfg, const LoadedSample& s,
                                  const losses::LossWeights& w);

struct GenerateOptions {
    grounding::GroundingConfig grounding;
    bool regrounding = true;
};

struct GenerationResult {
    ResponseSequence response;
    std::vector<Interval> stage1_intervals;
    std::vector<Interval> answer_intervals;  // one per answer reference, in order
    std::vector<Interval> final_intervals;   // per slot: answer interval if referenced, else stage-1
    bool truncated = false;
    int regrounding_disagreements = 0;
};

GenerationResult generate(ParamStore& store, const ModelConfig& cfg, const VideoFeatures& video,
                          const std::vector<int>& question, const GenerateOptions& opts = {});

struct TrainConfig {
    int epochs = 80;
    int batch_size = 8;
    AdamConfig adam{2e-3, 0.9, 0.999, 1e-8, 1.0, 0.0};
    losses::LossWeights weights;
    // Final learning rate as a fraction of adam.lr, reached linearly.
    double lr_final_fraction = 1.0;
    // Std-dev of fresh Gaussian noise added to frame features at every step.
    double feature_jitter = 0.1;
    uint64_t seed = 1;
    std::ostream* progress = nullptr;  // one line per epoch when set
};

struct EpochReport {
    int epoch = 0;
    double sft = 0.0;
    double gnd = 0.0;
    double cons = 0.0;
    double total = 0.0;
};

struct TrainReport {
    std::vector<EpochReport> epochs;
    int64_t steps = 0;
    double seconds = 0.0;
};

TrainReport train(ParamStore& store, const ModelConfig& cfg, const std::vector<LoadedSample>& data,
                  const TrainConfig& tc);

// ---- toy data --------------------------------------------------------------

struct ToyConfig {
    int min_frames = 24;
    int max_frames = 32;
    int feature_dim = 32;
    int num_concepts = 8;
    int min_events = 1;
    int max_events = 3;
    int min_event_len = 3;
    int max_event_len = 5;
    // Extra events of concepts the question does not ask about.
    int max_distractors = 1;
    // Name queried concepts in temporal order; otherwise in random order.
    bool ordered_question = false;
    double noise = 0.1;
    double signal = 1.0;
    uint64_t concept_seed = 7;

    void validate(const Vocab& vocab) const;  // throws ConfigError naming the field
};

// Unit concept directions shared by every sample generated with `cfg`.
std::vector<std::vector<double>> concept_table(const ToyConfig& cfg);

// Sample `index` of a dataset; depends only on (cfg, seed, index).
LoadedSample make_toy_sample(const ToyConfig& cfg, const Vocab& vocab, uint64_t seed, int index,
                             const std::string& id);

std::vector<LoadedSample> make_toy_dataset(int n, const ToyConfig& cfg, const Vocab& vocab, uint64_t seed,
                                           int first_index = 0, const std::string& id_prefix = "s");

}  // namespace evigrid::model
