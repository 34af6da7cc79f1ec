// SPDX-License-Identifier: Apache-2.0
//
// Preference optimisation over factorised response likelihoods. A response's
// log-probability is its token log-likelihood plus, for every evidence token
// in either stage, the log-probability that the similarity profile grounds
// the interval the response claims for that slot.

#pragma once

#include <iosfwd>
#include <span>
#include <vector>

#include "evigrid/autograd.hpp"
#include "evigrid/domain.hpp"
#include "evigrid/model.hpp"

namespace evigrid::fpo {

inline constexpr double kProbEps = 1e-7;

struct FpoConfig {
    double beta = 1.0;
    bool use_reference = false;
    const ParamStore* reference = nullptr;  // frozen policy; required iff use_reference

    void validate() const;  // throws ConfigError
};

// Σ_t [t in interval ? ln sims_t : ln(1 - sims_t)], each factor clamped to
// [eps, 1 - eps]. sims is T×1.
Var grounding_logprob(Var sims, const Interval& interval);
double grounding_logprob(std::span<const double> sims, const Interval& interval);

struct ResponseLogProb {
    double text_term = 0.0;
    double grounding_term = 0.0;
    double total = 0.0;
    Var text_var;
    Var grounding_var;
    Var total_var;
};

// `trace` must come from forward_teacher_forced on exactly `response`.
// `claimed` holds one interval per grounding slot.
ResponseLogProb response_logprob(const model::ForwardTrace& trace, const ResponseSequence& response,
                                 const std::vector<Interval>& claimed);

// −ln σ(β·[(pref − ref_pref) − (dispref − ref_dispref)]).
Var fpo_loss(const ResponseLogProb& pref, const ResponseLogProb& dispref, const FpoConfig& cfg,
             double ref_pref = 0.0, double ref_dispref = 0.0);
double fpo_loss_value(double pref_total, double dispref_total, const FpoConfig& cfg);

struct PairScore {
    double loss = 0.0;
    double margin = 0.0;  // pref.total − dispref.total (policy only)
    double text_margin = 0.0;
    double grounding_margin = 0.0;
};

// Scores a pair without touching gradients. `base` supplies video and question.
PairScore score_pair(ParamStore& store, const model::ModelConfig& mcfg, const model::LoadedSample& base,
                     const PreferencePair& pair, const FpoConfig& cfg);

// Builds the differentiable loss for one pair in `g` and returns its score.
PairScore pair_loss(Graph& g, ParamStore& store, const model::ModelConfig& mcfg, const model::LoadedSample& base,
                    const PreferencePair& pair, const FpoConfig& cfg, Var* loss_out);

// One optimizer step on a single pair; returns the pre-step score.
PairScore fpo_step(ParamStore& store, const model::ModelConfig& mcfg, const model::LoadedSample& base,
                   const PreferencePair& pair, const FpoConfig& cfg, const OptimizerConfig& opt);

struct PairExample {
    const model::LoadedSample* base = nullptr;
    PreferencePair pair;
};

struct FpoTrainConfig {
    int steps = 300;
    int batch_size = 8;
    // Gradient descent stops moving once the loss saturates; Adam rescales the
    // vanishing gradients back to full-size steps.
    OptimizerConfig optimizer{OptimizerKind::Adam, {2e-4, 0.9, 0.999, 1e-8, 1.0}};
    FpoConfig fpo;
    // Weight of the supervised objective on each pair's base sample; 0 runs
    // preference optimisation alone.
    double sft_weight = 1.0;
    losses::LossWeights sft_terms;
    uint64_t seed = 1;
};

struct FpoTrainReport {
    std::vector<PairScore> steps;  // mean pre-step score of each minibatch
    double seconds = 0.0;
};

// Minibatch training; writes one TSV line per step to `log` when given
// (`step, fpo_loss, margin, text_margin, grounding_margin`).
FpoTrainReport train_fpo(ParamStore& store, const model::ModelConfig& mcfg, const std::vector<PairExample>& data,
                         const FpoTrainConfig& tc, std::ostream* log = nullptr);

}  // namespace evigrid::fpo
