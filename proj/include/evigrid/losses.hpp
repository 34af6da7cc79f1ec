// SPDX-License-Identifier: Apache-2.0
//
// Supervised objective: token classification, per-frame grounding BCE
// averaged over every evidence token of both stages, and cross-stage
// evidence consistency. The total is their plain sum (weights default to 1).

#pragma once

#include <span>
#include <vector>

#include "evigrid/autograd.hpp"
#include "evigrid/domain.hpp"

namespace evigrid::losses {

inline constexpr double kBceEps = 1e-7;

struct LossBreakdown {
    double sft = 0.0;
    double gnd = 0.0;
    double cons = 0.0;
    double total = 0.0;
    Var total_var;  // differentiable total when built in a graph
};

// Mean over masked rows of -logprobs[row, target]. logprobs is N×V.
Var loss_sft(Var logprobs, std::span<const int> targets, std::span<const bool> mask);

// (1/T) Σ_t BCE(y_t, sims_t) with y = 1 inside gt; sims is T×1.
Var loss_gnd_single(Var sims, const Interval& gt);

// Mean of loss_gnd_single over all (profile, interval) pairs.
Var loss_gnd(std::span<const Var> sims, std::span<const Interval> gts);

// (1/K) Σ_k mean_c |stage1_k - stage2_k|; each feature is 1×C.
Var loss_cons(std::span<const Var> stage1, std::span<const Var> stage2);

struct LossWeights {
    double sft = 1.0;
    double gnd = 1.0;
    double cons = 1.0;
};

// Weighted sum of whichever components are present (invalid Var = absent).
LossBreakdown loss_total(Var sft, Var gnd, Var cons, const LossWeights& w = {});

}  // namespace evigrid::losses
