// SPDX-License-Identifier: Apache-2.0
//
// Evidence-token mechanics: query projection, per-frame similarity, salient
// frame selection, semantic aggregation and interval read-out.

#pragma once

#include <span>
#include <string>
#include <variant>
#include <vector>

#include "evigrid/autograd.hpp"
#include "evigrid/domain.hpp"

namespace evigrid::grounding {

struct SimilarityProfile {
    std::vector<double> sims;  // each in (0, 1)
    int source_slot = -1;
    Stage stage = Stage::Grounding;
    Var var;  // T×1 node the values came from, when built in a graph

    int num_frames() const { return static_cast<int>(sims.size()); }
    int argmax() const;
};

enum class IntervalMode { RunOfArgmax, FullSpan };

struct GroundingConfig {
    double salient_ratio = 0.6;
    IntervalMode interval_mode = IntervalMode::RunOfArgmax;

    void validate() const;  // throws ConfigError unless 0 < ratio <= 1
};

// Two-layer perceptron C→C (tanh) → C applied to the evidence hidden state
// before it is used as a similarity query.
struct EvidenceProjection {
    Var w1, b1, w2, b2;

    static constexpr const char* kPrefix = "evi_proj";
    static void add_params(ParamStore& store, int channels, const std::function<double()>& init);
    static EvidenceProjection bind(Graph& g, ParamStore& store);
};

Var project_evidence(Var evi_hidden, const EvidenceProjection& proj);

// sims[t] = logistic(<query, frames[t]> / sqrt(C)); query is 1×C, frames T×C.
SimilarityProfile frame_similarities(Var query, Var frames);

struct TrainSelect {
    Interval gt;
};
struct InferSelect {
    GroundingConfig cfg;
};
using SelectMode = std::variant<TrainSelect, InferSelect>;

// Train: exactly the frames of gt. Infer: {t : sims[t] >= ratio * max sims},
// never empty. Result is sorted ascending.
std::vector<int> select_salient(const SimilarityProfile& profile, const SelectMode& mode);

// evi + mean(frames[salient]); evi is 1×C.
Var aggregate_semantics(Var evi, Var frames, std::span<const int> salient);

Interval intervals_from_salient(std::span<const int> salient, const SimilarityProfile& profile, IntervalMode mode);

}  // namespace evigrid::grounding
