// SPDX-License-Identifier: Apache-2.0
//
// Dispreferred-response synthesis. Each pair applies exactly one factor to a
// few selected events of an annotated response: a temporal factor (shift,
// add, delete, merge) or a textual one (distort, repeat). The provenance
// records say precisely what changed, so validate_pair can check the result.

#pragma once

#include <array>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "evigrid/domain.hpp"
#include "evigrid/rng.hpp"

namespace evigrid::synth {

enum class DistorterKind { RuleBased, Remote };

struct SynthConfig {
    // Relative factor weights, renormalized over the factors feasible for a sample.
    std::array<double, kNumFactors> weights{1.0, 1.0, 1.0, 1.0, 1.0, 1.0};
    double shift_min = 0.1;  // fraction of event length
    double shift_max = 0.4;
    int max_events = 3;
    DistorterKind distorter = DistorterKind::RuleBased;
    std::string endpoint;  // Remote: http://host:port/path
    int max_in_flight = 4;
    int max_attempts = 8;
    uint64_t seed = 1;

    void validate() const;  // throws ConfigError
};

struct Selection {
    Factor factor = Factor::TemporalShift;
    std::vector<int> events;
};

// Draws a feasible factor by weight, then 1..min(K, max_events) events.
Selection choose_factor_and_events(const AnnotationSample& sample, const SynthConfig& cfg, Rng& rng);

struct Perturbed {
    ScoredResponse response;
    std::vector<PerturbationRecord> records;
};

// Translates `iv` by ⌈fraction·length⌉ frames in `direction` (+1/−1), never
// past [lo, hi]; length is preserved. Returns iv unchanged if it cannot move.
Interval shift_interval(const Interval& iv, double fraction, int direction, int lo, int hi);

Perturbed perturb_temporal(const AnnotationSample& sample, Factor factor, const std::vector<int>& events,
                           const SynthConfig& cfg, Rng& rng);

class Distorter {
public:
    virtual ~Distorter() = default;
    // Returns a span that differs from the input; throws DistorterError.
    virtual std::vector<int> distort(std::span<const int> span, Rng& rng) = 0;
};

// One of: swap a concept token for another concept, swap two positions, drop
// a token (length >= 2). Falls back to replacing a token with another
// non-special id when no rule applies.
std::vector<int> rule_based_distort(std::span<const int> span, Rng& rng, const Vocab& vocab);

class RuleBasedDistorter : public Distorter {
public:
    explicit RuleBasedDistorter(Vocab vocab) : vocab_(std::move(vocab)) {}
    std::vector<int> distort(std::span<const int> span, Rng& rng) override;

private:
    Vocab vocab_;
};

// POSTs {"tokens":[...],"vocab":{id:string}} and expects {"tokens":[...]}.
// Safe to share across threads; at most `max_in_flight` requests at once.
std::unique_ptr<Distorter> make_remote_distorter(const std::string& endpoint, const Vocab& vocab, int max_in_flight);

std::unique_ptr<Distorter> make_distorter(const SynthConfig& cfg, const Vocab& vocab);

Perturbed perturb_text(const AnnotationSample& sample, Factor factor, const std::vector<int>& events,
                       Distorter& distorter, Rng& rng);

// Preferred = the sample's own response; dispreferred = one perturbation,
// retried up to cfg.max_attempts times on infeasible draws.
PreferencePair synthesize_pair(const AnnotationSample& sample, const SynthConfig& cfg, Distorter& distorter,
                               uint64_t seed);

}  // namespace evigrid::synth
