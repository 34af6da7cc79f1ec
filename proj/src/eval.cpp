// SPDX-License-Identifier: Apache-2.0

#include "evigrid/eval.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <sstream>
#include <unordered_map>

#include "json.hpp"

namespace evigrid::eval {

using json = nlohmann::ordered_json;

double iou(const Interval& a, const Interval& b) {
    const int inter = std::min(a.end, b.end) - std::max(a.start, b.start) + 1;
    if (inter <= 0) {
        return 0.0;
    }
    const int uni = a.length() + b.length() - inter;
    return static_cast<double>(inter) / static_cast<double>(uni);
}

std::map<double, double> recall_at_1(std::span<const Interval> preds, std::span<const Interval> gts,
                                     std::span<const double> thresholds) {
    if (preds.size() != gts.size() || preds.empty()) {
        throw ArityMismatch("recall_at_1: " + std::to_string(preds.size()) + " predictions for " +
                            std::to_string(gts.size()) + " ground truths (need an equal, nonzero count)");
    }
    std::map<double, double> out;
    for (double th : thresholds) {
        int hits = 0;
        for (size_t i = 0; i < preds.size(); ++i) {
            hits += iou(preds[i], gts[i]) >= th ? 1 : 0;
        }
        out[th] = static_cast<double>(hits) / static_cast<double>(preds.size());
    }
    return out;
}

std::vector<Match> greedy_matching(std::span<const Interval> preds, std::span<const Interval> gts, double thresh) {
    std::vector<Match> edges;
    for (size_t p = 0; p < preds.size(); ++p) {
        for (size_t g = 0; g < gts.size(); ++g) {
            const double v = iou(preds[p], gts[g]);
            if (v >= thresh && v > 0.0) {
                edges.push_back({static_cast<int>(p), static_cast<int>(g), v});
            }
        }
    }
    std::vector<bool> pred_used(preds.size(), false);
    std::vector<bool> gt_used(gts.size(), false);
    std::vector<Match> out;
    while (true) {
        std::vector<int> pred_deg(preds.size(), 0);
        std::vector<int> gt_deg(gts.size(), 0);
        for (const auto& e : edges) {
            if (!pred_used[static_cast<size_t>(e.pred)] && !gt_used[static_cast<size_t>(e.gt)]) {
                ++pred_deg[static_cast<size_t>(e.pred)];
                ++gt_deg[static_cast<size_t>(e.gt)];
            }
        }
        const Match* best = nullptr;
        int best_deg = 0;
        for (const auto& e : edges) {
            if (pred_used[static_cast<size_t>(e.pred)] || gt_used[static_cast<size_t>(e.gt)]) {
                continue;
            }
            const int deg = pred_deg[static_cast<size_t>(e.pred)] + gt_deg[static_cast<size_t>(e.gt)];
            if (best == nullptr || e.iou > best->iou || (e.iou == best->iou && deg < best_deg)) {
                best = &e;
                best_deg = deg;
            }
        }
        if (best == nullptr) {
            break;
        }
        pred_used[static_cast<size_t>(best->pred)] = true;
        gt_used[static_cast<size_t>(best->gt)] = true;
        out.push_back(*best);
    }
    return out;
}

EventScore event_f1(std::span<const Interval> preds, std::span<const Interval> gts, double thresh) {
    EventScore s;
    if (preds.empty() && gts.empty()) {
        s.precision = s.recall = s.f1 = 1.0;
        return s;
    }
    const std::vector<Match> greedy = greedy_matching(preds, gts, thresh);
    // Kuhn augmentation from the greedy matching.
    std::vector<int> gt_owner(gts.size(), -1);
    std::vector<int> pred_match(preds.size(), -1);
    for (const auto& m : greedy) {
        gt_owner[static_cast<size_t>(m.gt)] = m.pred;
        pred_match[static_cast<size_t>(m.pred)] = m.gt;
    }
    std::vector<std::vector<int>> adj(preds.size());
    for (size_t p = 0; p < preds.size(); ++p) {
        for (size_t g = 0; g < gts.size(); ++g) {
            const double v = iou(preds[p], gts[g]);
            if (v >= thresh && v > 0.0) {
                adj[p].push_back(static_cast<int>(g));
            }
        }
    }
    std::vector<bool> seen;
    std::function<bool(int)> augment = [&](int p) {
        for (int g : adj[static_cast<size_t>(p)]) {
            if (seen[static_cast<size_t>(g)]) {
                continue;
            }
            seen[static_cast<size_t>(g)] = true;
            const int owner = gt_owner[static_cast<size_t>(g)];
            if (owner < 0 || augment(owner)) {
                gt_owner[static_cast<size_t>(g)] = p;
                pred_match[static_cast<size_t>(p)] = g;
                return true;
            }
        }
        return false;
    };
    for (size_t p = 0; p < preds.size(); ++p) {
        if (pred_match[p] < 0) {
            seen.assign(gts.size(), false);
            augment(static_cast<int>(p));
        }
    }
    for (size_t p = 0; p < preds.size(); ++p) {
        if (pred_match[p] >= 0) {
            s.matches.push_back({static_cast<int>(p), pred_match[p], iou(preds[p], gts[static_cast<size_t>(pred_match[p])])});
        }
    }
    const double m = static_cast<double>(s.matches.size());
    s.precision = preds.empty() ? 0.0 : m / static_cast<double>(preds.size());
    s.recall = gts.empty() ? 0.0 : m / static_cast<double>(gts.size());
    s.f1 = s.precision + s.recall > 0.0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
    return s;
}

double caption_overlap_f1(std::span<const int> pred, std::span<const int> gt) {
    if (pred.empty() && gt.empty()) {
        return 1.0;
    }
    if (pred.empty() || gt.empty()) {
        return 0.0;
    }
    std::unordered_map<int, int> counts;
    for (int t : gt) {
        ++counts[t];
    }
    int common = 0;
    for (int t : pred) {
        auto it = counts.find(t);
        if (it != counts.end() && it->second > 0) {
            --it->second;
            ++common;
        }
    }
    if (common == 0) {
        return 0.0;
    }
    const double p = static_cast<double>(common) / static_cast<double>(pred.size());
    const double r = static_cast<double>(common) / static_cast<double>(gt.size());
    return 2.0 * p * r / (p + r);
}

void EvalConfig::validate() const {
    if (thresholds.empty()) {
        throw ConfigError("eval.thresholds must list at least one value");
    }
    for (double t : thresholds) {
        if (!(t > 0.0 && t <= 1.0)) {
            throw ConfigError("eval.thresholds values must lie in (0, 1]");
        }
    }
    if (!(match_iou > 0.0 && match_iou <= 1.0)) {
        throw ConfigError("eval.match_iou must lie in (0, 1]");
    }
}

std::string recall_key(double threshold) {
    std::ostringstream os;
    os << "recall_at_1_iou_" << threshold;
    return os.str();
}

EvalReport evaluate(const std::vector<Prediction>& preds, const std::vector<AnnotationSample>& dataset,
                    const EvalConfig& cfg) {
    cfg.validate();
    std::unordered_map<std::string, const Prediction*> by_id;
    for (const auto& p : preds) {
        if (!by_id.emplace(p.id, &p).second) {
            throw InvariantError("duplicate prediction for sample " + p.id);
        }
    }
    EvalReport report;
    report.config = cfg;
    std::vector<Interval> r1_preds;
    std::vector<Interval> r1_gts;
    double p_sum = 0.0;
    double r_sum = 0.0;
    double f_sum = 0.0;
    double sim_sum = 0.0;
    long pred_events = 0;
    long gt_events = 0;
    for (const auto& sample : dataset) {
        auto it = by_id.find(sample.id);
        if (it == by_id.end()) {
            throw MissingPrediction("no prediction for sample " + sample.id);
        }
        const Prediction& p = *it->second;
        SampleRecord rec;
        rec.id = sample.id;
        rec.num_gt = static_cast<int>(sample.time_gt.size());
        rec.num_pred = static_cast<int>(p.intervals.size());
        const EventScore es = event_f1(p.intervals, sample.time_gt, cfg.match_iou);
        rec.precision = es.precision;
        rec.recall = es.recall;
        rec.f1 = es.f1;
        rec.matches = es.matches;
        if (sample.time_gt.size() == 1) {
            rec.single_event = true;
            // A missing prediction counts as a miss at every threshold.
            const Interval pred = p.intervals.empty() ? Interval{-2, -2} : p.intervals.front();
            rec.first_iou = p.intervals.empty() ? 0.0 : iou(pred, sample.time_gt.front());
            r1_preds.push_back(pred);
            r1_gts.push_back(sample.time_gt.front());
        }
        rec.sim_proxy = caption_overlap_f1(p.text, sample.response.text_tokens());
        p_sum += rec.precision;
        r_sum += rec.recall;
        f_sum += rec.f1;
        sim_sum += rec.sim_proxy;
        pred_events += rec.num_pred;
        gt_events += rec.num_gt;
        report.records.push_back(std::move(rec));
    }
    const double n = static_cast<double>(dataset.size());
    if (!dataset.empty()) {
        report.aggregates["event_precision"] = p_sum / n;
        report.aggregates["event_recall"] = r_sum / n;
        report.aggregates["event_f1"] = f_sum / n;
        report.aggregates["sim_proxy"] = sim_sum / n;
    }
    if (!r1_preds.empty()) {
        for (const auto& [th, rate] : recall_at_1(r1_preds, r1_gts, cfg.thresholds)) {
            report.aggregates[recall_key(th)] = rate;
        }
    }
    report.counts["samples"] = static_cast<long>(dataset.size());
    report.counts["single_event_samples"] = static_cast<long>(r1_preds.size());
    report.counts["predicted_events"] = pred_events;
    report.counts["ground_truth_events"] = gt_events;
    return report;
}

std::string report_json(const EvalReport& report) {
    json cfg;
    cfg["thresholds"] = report.config.thresholds;
    cfg["match_iou"] = report.config.match_iou;
    cfg["matching"] = "one-to-one, greedy by descending IoU, extended to maximum cardinality";
    cfg["f1_aggregation"] = "macro mean over samples; empty vs empty scores 1";
    cfg["recall_at_1"] = "single-event samples, first predicted interval";
    cfg["sim_proxy"] = "token-multiset F1 of answer text; not a sentence-embedding similarity";
    json agg = json::object();
    for (const auto& [k, v] : report.aggregates) {
        agg[k] = v;
    }
    json counts = json::object();
    for (const auto& [k, v] : report.counts) {
        counts[k] = v;
    }
    json per = json::array();
    for (const auto& r : report.records) {
        json m = json::array();
        for (const auto& x : r.matches) {
            m.push_back({{"pred", x.pred}, {"gt", x.gt}, {"iou", x.iou}});
        }
        json rec = {{"id", r.id},          {"num_gt", r.num_gt}, {"num_pred", r.num_pred}, {"precision", r.precision},
                    {"recall", r.recall},  {"f1", r.f1},         {"matches", m},          {"sim_proxy", r.sim_proxy}};
        if (r.single_event) {
            rec["first_iou"] = r.first_iou;
        }
        per.push_back(std::move(rec));
    }
    json out;
    out["config"] = cfg;
    out["aggregates"] = agg;
    out["counts"] = counts;
    if (!report.diagnostics.empty()) {
        json d = json::object();
        for (const auto& [k, v] : report.diagnostics) {
            d[k] = v;
        }
        out["diagnostics"] = d;
    }
    out["per_sample"] = per;
    return out.dump(2) + "\n";
}

std::string report_tsv(const EvalReport& report) {
    std::ostringstream os;
    os << "metric\tvalue\n";
    for (const auto& [k, v] : report.aggregates) {
        os << k << '\t' << v << '\n';
    }
    for (const auto& [k, v] : report.counts) {
        os << k << '\t' << v << '\n';
    }
    for (const auto& [k, v] : report.diagnostics) {
        os << k << '\t' << v << '\n';
    }
    return os.str();
}

}  // namespace evigrid::eval
