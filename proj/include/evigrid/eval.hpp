// SPDX-License-Identifier: Apache-2.0
//
// Temporal grounding metrics (IoU, recall@1, event F1) and a token-overlap
// caption score, aggregated into a JSON/TSV report.

#pragma once

#include <map>
#include <span>
#include <string>
#include <vector>

#include "evigrid/domain.hpp"

namespace evigrid::eval {

// |a ∩ b| / |a ∪ b| with inclusive lengths; 0 when disjoint.
double iou(const Interval& a, const Interval& b);

// Fraction of samples whose prediction reaches each threshold.
std::map<double, double> recall_at_1(std::span<const Interval> preds, std::span<const Interval> gts,
                                     std::span<const double> thresholds);

struct Match {
    int pred = 0;
    int gt = 0;
    double iou = 0.0;
    bool operator==(const Match&) const = default;
};

struct EventScore {
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::vector<Match> matches;
};

// One-to-one matching over pairs with IoU >= thresh. Pairs are taken greedily
// in descending IoU (ties go to the pair whose endpoints have the fewest
// remaining candidates); the result is then extended by augmenting paths, so
// the match count is always the maximum possible. With disjoint ground truth
// the greedy pass is already maximal. Empty vs empty scores 1.
EventScore event_f1(std::span<const Interval> preds, std::span<const Interval> gts, double thresh = 0.5);

// Greedy pass only (no augmentation); exposed for the optimality tests.
std::vector<Match> greedy_matching(std::span<const Interval> preds, std::span<const Interval> gts, double thresh);

// Token-multiset F1; identical (including both empty) scores 1.
double caption_overlap_f1(std::span<const int> pred, std::span<const int> gt);

struct Prediction {
    std::string id;
    std::vector<Interval> intervals;
    std::vector<int> text;
};

struct EvalConfig {
    std::vector<double> thresholds{0.5, 0.7};
    double match_iou = 0.5;
    void validate() const;  // throws ConfigError
};

struct SampleRecord {
    std::string id;
    int num_gt = 0;
    int num_pred = 0;
    double precision = 0.0;
    double recall = 0.0;
    double f1 = 0.0;
    std::vector<Match> matches;
    bool single_event = false;
    double first_iou = 0.0;  // single-event samples: IoU of the first prediction (0 if none)
    double sim_proxy = 0.0;
};

struct EvalReport {
    EvalConfig config;
    std::vector<SampleRecord> records;  // dataset order
    std::map<std::string, double> aggregates;
    std::map<std::string, long> counts;
    std::map<std::string, double> diagnostics;  // caller-supplied extras
};

// Joins predictions to the dataset by sample id; MissingPrediction for any
// sample without one.
EvalReport evaluate(const std::vector<Prediction>& preds, const std::vector<AnnotationSample>& dataset,
                    const EvalConfig& cfg);

std::string recall_key(double threshold);  // "recall_at_1_iou_0.5"

std::string report_json(const EvalReport& report);
std::string report_tsv(const EvalReport& report);

}  // namespace evigrid::eval
