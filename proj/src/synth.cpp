// SPDX-License-Identifier: Apache-2.0

#include "evigrid/synth.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <regex>
#include <semaphore>

#include "httplib.h"
#include "json.hpp"

namespace evigrid::synth {

using json = nlohmann::json;

void SynthConfig::validate() const {
    double total = 0.0;
    for (int f = 0; f < kNumFactors; ++f) {
        const double w = weights[static_cast<size_t>(f)];
        if (!(w >= 0.0) || !std::isfinite(w)) {
            throw ConfigError("synth.weights." + std::string(factor_name(static_cast<Factor>(f))) +
                              " must be a nonnegative number");
        }
        total += w;
    }
    if (total <= 0.0) {
        throw ConfigError("synth.weights: at least one factor needs a positive weight");
    }
    if (!(shift_min > 0.0 && shift_min <= shift_max && shift_max <= 1.0)) {
        throw ConfigError("synth.shift_min/shift_max must satisfy 0 < min <= max <= 1");
    }
    if (max_events < 1) {
        throw ConfigError("synth.max_events must be >= 1");
    }
    if (max_attempts < 1) {
        throw ConfigError("synth.max_attempts must be >= 1");
    }
    if (distorter == DistorterKind::Remote && endpoint.empty()) {
        throw ConfigError("synth.endpoint is required for the remote distorter");
    }
    if (max_in_flight < 1) {
        throw ConfigError("synth.max_in_flight must be >= 1");
    }
}

namespace {

std::vector<int> pick_events(std::vector<int> pool, int max_events, Rng& rng) {
    const int n = rng.uniform_int(1, std::min(static_cast<int>(pool.size()), max_events));
    rng.shuffle(pool.begin(), pool.end());
    pool.resize(static_cast<size_t>(n));
    std::sort(pool.begin(), pool.end());
    return pool;
}

std::vector<int> range(int begin, int end) {
    std::vector<int> out;
    for (int i = begin; i < end; ++i) {
        out.push_back(i);
    }
    return out;
}

// Events whose text differs from their predecessor's, i.e. where repeating
// the previous answer would actually change something.
std::vector<int> repeat_candidates(const EventTexts& texts) {
    std::vector<int> out;
    for (size_t k = 1; k < texts.per_event.size(); ++k) {
        if (texts.per_event[k] != texts.per_event[k - 1]) {
            out.push_back(static_cast<int>(k));
        }
    }
    return out;
}

EventTexts event_texts(const AnnotationSample& sample) {
    EventTexts t = split_event_texts(sample.response);
    t.per_event.resize(static_cast<size_t>(sample.response.num_events()));
    return t;
}

}  // namespace

Selection choose_factor_and_events(const AnnotationSample& sample, const SynthConfig& cfg, Rng& rng) {
    const int k = sample.response.num_events();
    if (k < 1) {
        throw InfeasibleFactor("sample " + sample.id + " has no events to perturb");
    }
    const EventTexts texts = event_texts(sample);
    const std::vector<int> repeatable = repeat_candidates(texts);
    auto feasible = [&](Factor f) {
        switch (f) {
            case Factor::MergeEvents:
                return k >= 2;
            case Factor::RepeatText:
                return !repeatable.empty();
            default:
                return true;
        }
    };
    double total = 0.0;
    for (int f = 0; f < kNumFactors; ++f) {
        if (feasible(static_cast<Factor>(f))) {
            total += cfg.weights[static_cast<size_t>(f)];
        }
    }
    if (total <= 0.0) {
        throw InfeasibleFactor("no weighted factor is feasible for sample " + sample.id + " with K=" +
                               std::to_string(k));
    }
    double u = rng.uniform() * total;
    Factor chosen = Factor::TemporalShift;
    bool found = false;
    for (int f = 0; f < kNumFactors; ++f) {
        const Factor fac = static_cast<Factor>(f);
        const double w = cfg.weights[static_cast<size_t>(f)];
        if (!feasible(fac) || w <= 0.0) {
            continue;
        }
        chosen = fac;
        found = true;
        if (u < w) {
            break;
        }
        u -= w;
    }
    if (!found) {
        throw InfeasibleFactor("no weighted factor is feasible for sample " + sample.id);
    }

    Selection sel;
    sel.factor = chosen;
    switch (chosen) {
        case Factor::TemporalShift:
        case Factor::AddEvent:
        case Factor::DistortText:
            sel.events = pick_events(range(0, k), cfg.max_events, rng);
            break;
        case Factor::DeleteEvent:
            // With a single event the only deletion empties the response.
            sel.events = k == 1 ? std::vector<int>{0} : pick_events(range(0, k), std::min(cfg.max_events, k - 1), rng);
            break;
        case Factor::MergeEvents: {
            const int i = rng.uniform_int(0, k - 2);
            sel.events = {i, i + 1};
            break;
        }
        case Factor::RepeatText:
            sel.events = pick_events(repeatable, cfg.max_events, rng);
            break;
    }
    return sel;
}

Interval shift_interval(const Interval& iv, double fraction, int direction, int lo, int hi) {
    const int len = iv.length();
    const int offset = static_cast<int>(std::ceil(fraction * static_cast<double>(len)));
    const int max_start = hi - len + 1;
    int start = iv.start;
    if (direction > 0) {
        start = std::max(iv.start, std::min(iv.start + offset, max_start));
    } else {
        start = std::min(iv.start, std::max(iv.start - offset, lo));
    }
    return Interval{start, start + len - 1};
}

namespace {

void check_events(const AnnotationSample& sample, const std::vector<int>& events) {
    const int k = sample.response.num_events();
    if (events.empty()) {
        throw InfeasiblePerturbation("no events selected");
    }
    for (int e : events) {
        if (e < 0 || e >= k) {
            throw InfeasiblePerturbation("event index " + std::to_string(e) + " outside 0.." + std::to_string(k - 1));
        }
    }
}

ScoredResponse rebuild(const std::vector<Interval>& ivs, const std::vector<std::vector<int>>& texts,
                       const std::vector<int>& tail) {
    return ScoredResponse{build_response(ivs, EventTexts{texts, tail}), ivs};
}

}  // namespace

Perturbed perturb_temporal(const AnnotationSample& sample, Factor factor, const std::vector<int>& events,
                           const SynthConfig& cfg, Rng& rng) {
    check_events(sample, events);
    const int t_count = sample.num_frames();
    const EventTexts orig = event_texts(sample);
    std::vector<Interval> ivs = sample.time_gt;
    std::vector<std::vector<int>> texts = orig.per_event;
    Perturbed out;

    switch (factor) {
        case Factor::TemporalShift: {
            const int k_count = static_cast<int>(ivs.size());
            for (int k : events) {
                const Interval before = ivs[static_cast<size_t>(k)];
                const int lo = k > 0 ? ivs[static_cast<size_t>(k - 1)].end + 1 : 0;
                const int hi = k + 1 < k_count ? ivs[static_cast<size_t>(k + 1)].start - 1 : t_count - 1;
                const double f = rng.uniform(cfg.shift_min, cfg.shift_max);
                const int dir = rng.coin() ? 1 : -1;
                Interval after = shift_interval(before, f, dir, lo, hi);
                if (after == before) {
                    after = shift_interval(before, f, -dir, lo, hi);
                }
                if (after == before) {
                    throw InfeasiblePerturbation("event " + std::to_string(k) + " has no room to shift");
                }
                ivs[static_cast<size_t>(k)] = after;
                out.records.push_back({factor, {k}, {before}, {after}, {}, {}});
            }
            break;
        }
        case Factor::AddEvent: {
            std::vector<std::pair<Interval, int>> events_now;  // interval, source text index (-1 = original)
            for (int k : events) {
                const Interval src = sample.time_gt[static_cast<size_t>(k)];
                std::vector<Interval> options;
                for (int len = rng.uniform_int(1, src.length()); len >= 1 && options.empty(); --len) {
                    for (int s = 0; s + len <= t_count; ++s) {
                        const Interval cand{s, s + len - 1};
                        const bool clash = std::any_of(ivs.begin(), ivs.end(),
                                                       [&](const Interval& iv) { return iv.overlaps(cand); });
                        if (!clash) {
                            options.push_back(cand);
                        }
                    }
                }
                if (options.empty()) {
                    throw InfeasiblePerturbation("no free interval to add an event");
                }
                const Interval added = options[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(options.size()) - 1))];
                // Insert in temporal order; ties keep existing events first.
                auto pos = std::upper_bound(ivs.begin(), ivs.end(), added,
                                            [](const Interval& a, const Interval& b) { return a.start < b.start; });
                const auto idx = pos - ivs.begin();
                ivs.insert(pos, added);
                texts.insert(texts.begin() + idx, orig.per_event[static_cast<size_t>(k)]);
                out.records.push_back({factor, {k}, {}, {added}, {}, {orig.per_event[static_cast<size_t>(k)]}});
            }
            std::sort(out.records.begin(), out.records.end(), [](const auto& a, const auto& b) {
                return a.after_intervals.front().start < b.after_intervals.front().start;
            });
            break;
        }
        case Factor::DeleteEvent: {
            if (static_cast<int>(events.size()) > static_cast<int>(ivs.size())) {
                throw InfeasiblePerturbation("cannot delete more events than exist");
            }
            std::vector<Interval> kept_iv;
            std::vector<std::vector<int>> kept_text;
            for (size_t k = 0; k < ivs.size(); ++k) {
                if (std::find(events.begin(), events.end(), static_cast<int>(k)) != events.end()) {
                    out.records.push_back({factor, {static_cast<int>(k)}, {ivs[k]}, {}, {texts[k]}, {}});
                } else {
                    kept_iv.push_back(ivs[k]);
                    kept_text.push_back(texts[k]);
                }
            }
            ivs = std::move(kept_iv);
            texts = std::move(kept_text);
            break;
        }
        case Factor::MergeEvents: {
            if (events.size() != 2 || events[1] != events[0] + 1) {
                throw InfeasiblePerturbation("MergeEvents needs an adjacent pair of events");
            }
            const size_t i = static_cast<size_t>(events[0]);
            const Interval merged{std::min(ivs[i].start, ivs[i + 1].start), std::max(ivs[i].end, ivs[i + 1].end)};
            std::vector<int> text = texts[i];
            text.insert(text.end(), texts[i + 1].begin(), texts[i + 1].end());
            out.records.push_back({factor, events, {ivs[i], ivs[i + 1]}, {merged}, {texts[i], texts[i + 1]}, {text}});
            ivs[i] = merged;
            texts[i] = std::move(text);
            ivs.erase(ivs.begin() + static_cast<std::ptrdiff_t>(i) + 1);
            texts.erase(texts.begin() + static_cast<std::ptrdiff_t>(i) + 1);
            break;
        }
        default:
            throw InfeasiblePerturbation(std::string(factor_name(factor)) + " is not a temporal factor");
    }
    out.response = rebuild(ivs, texts, orig.tail);
    return out;
}

// ---- distortion ---------------------------------------------------------------

std::vector<int> rule_based_distort(std::span<const int> span, Rng& rng, const Vocab& vocab) {
    if (span.empty()) {
        throw DistorterError("cannot distort an empty span");
    }
    const std::vector<int> in(span.begin(), span.end());
    std::vector<int> concept_pos;
    for (size_t i = 0; i < in.size(); ++i) {
        if (vocab.is_concept(in[i])) {
            concept_pos.push_back(static_cast<int>(i));
        }
    }
    std::vector<std::pair<int, int>> swaps;
    for (size_t i = 0; i < in.size(); ++i) {
        for (size_t j = i + 1; j < in.size(); ++j) {
            if (in[i] != in[j]) {
                swaps.emplace_back(static_cast<int>(i), static_cast<int>(j));
            }
        }
    }
    enum Rule { Replace, Swap, Drop };
    std::vector<Rule> rules;
    if (!concept_pos.empty()) rules.push_back(Replace);
    if (!swaps.empty()) rules.push_back(Swap);
    if (in.size() >= 2) rules.push_back(Drop);

    std::vector<int> out = in;
    if (rules.empty()) {
        // Single non-concept token: substitute another ordinary id.
        std::vector<int> pool;
        for (int t = 0; t < vocab.size; ++t) {
            if (!vocab.is_special(t) && t != in[0]) {
                pool.push_back(t);
            }
        }
        out[0] = pool[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(pool.size()) - 1))];
        return out;
    }
    switch (rules[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(rules.size()) - 1))]) {
        case Replace: {
            const int p = concept_pos[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(concept_pos.size()) - 1))];
            int c = vocab.concept_begin + rng.uniform_int(0, vocab.num_concepts - 2);
            if (c >= out[static_cast<size_t>(p)]) {
                ++c;
            }
            out[static_cast<size_t>(p)] = c;
            break;
        }
        case Swap: {
            const auto [i, j] = swaps[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(swaps.size()) - 1))];
            std::swap(out[static_cast<size_t>(i)], out[static_cast<size_t>(j)]);
            break;
        }
        case Drop:
            out.erase(out.begin() + rng.uniform_int(0, static_cast<int>(out.size()) - 1));
            break;
    }
    return out;
}

std::vector<int> RuleBasedDistorter::distort(std::span<const int> span, Rng& rng) {
    return rule_based_distort(span, rng, vocab_);
}

namespace {

class RemoteDistorter : public Distorter {
public:
    RemoteDistorter(std::string base, std::string path, const Vocab& vocab, int max_in_flight)
        : base_(std::move(base)), path_(std::move(path)), slots_(max_in_flight) {
        for (const auto& [id, text] : vocab.hint_table()) {
            vocab_[id] = text;
        }
    }

    std::vector<int> distort(std::span<const int> span, Rng&) override {
        const std::vector<int> in(span.begin(), span.end());
        const json body = {{"tokens", in}, {"vocab", vocab_}};
        slots_.acquire();
        httplib::Result res;
        {
            httplib::Client cli(base_);
            cli.set_connection_timeout(10);
            cli.set_read_timeout(30);
            res = cli.Post(path_, body.dump(), "application/json");
        }
        slots_.release();
        const std::string where = base_ + path_;
        if (!res) {
            throw DistorterError(where + ": request failed (" + httplib::to_string(res.error()) + ")");
        }
        if (res->status != 200) {
            throw DistorterError(where + ": HTTP " + std::to_string(res->status) + ": " + res->body);
        }
        std::vector<int> out;
        try {
            out = json::parse(res->body).at("tokens").get<std::vector<int>>();
        } catch (const json::exception& e) {
            throw DistorterError(where + ": malformed response " + res->body + " (" + e.what() + ")");
        }
        if (out == in) {
            throw DistorterError(where + ": returned the span unchanged: " + res->body);
        }
        return out;
    }

private:
    std::string base_;
    std::string path_;
    json vocab_ = json::object();
    std::counting_semaphore<1024> slots_;
};

}  // namespace

std::unique_ptr<Distorter> make_remote_distorter(const std::string& endpoint, const Vocab& vocab, int max_in_flight) {
    static const std::regex re(R"(^(http://[^/]+)(/.*)?$)");
    std::smatch m;
    if (!std::regex_match(endpoint, m, re)) {
        throw ConfigError("synth.endpoint must look like http://host:port/path, got " + endpoint);
    }
    const std::string path = m[2].matched ? m[2].str() : "/";
    return std::make_unique<RemoteDistorter>(m[1].str(), path, vocab, std::clamp(max_in_flight, 1, 1024));
}

std::unique_ptr<Distorter> make_distorter(const SynthConfig& cfg, const Vocab& vocab) {
    if (cfg.distorter == DistorterKind::Remote) {
        return make_remote_distorter(cfg.endpoint, vocab, cfg.max_in_flight);
    }
    return std::make_unique<RuleBasedDistorter>(vocab);
}

Perturbed perturb_text(const AnnotationSample& sample, Factor factor, const std::vector<int>& events,
                       Distorter& distorter, Rng& rng) {
    check_events(sample, events);
    const EventTexts orig = event_texts(sample);
    std::vector<std::vector<int>> texts = orig.per_event;
    Perturbed out;
    for (int k : events) {
        const auto& before = orig.per_event[static_cast<size_t>(k)];
        std::vector<int> after;
        if (factor == Factor::DistortText) {
            if (before.empty()) {
                throw InfeasiblePerturbation("event " + std::to_string(k) + " has no text to distort");
            }
            after = distorter.distort(before, rng);
            if (after == before) {
                throw DistorterError("distorter returned the span unchanged");
            }
        } else if (factor == Factor::RepeatText) {
            if (k == 0) {
                throw InfeasiblePerturbation("the first event has no predecessor to repeat");
            }
            after = orig.per_event[static_cast<size_t>(k - 1)];
            if (after == before) {
                throw InfeasiblePerturbation("event " + std::to_string(k) + " already repeats its predecessor");
            }
        } else {
            throw InfeasiblePerturbation(std::string(factor_name(factor)) + " is not a text factor");
        }
        texts[static_cast<size_t>(k)] = after;
        out.records.push_back({factor, {k}, {}, {}, {before}, {after}});
    }
    out.response = rebuild(sample.time_gt, texts, orig.tail);
    return out;
}

PreferencePair synthesize_pair(const AnnotationSample& sample, const SynthConfig& cfg, Distorter& distorter,
                               uint64_t seed) {
    cfg.validate();
    for (const auto& v : sample.response.violations()) {
        throw InvariantError("sample " + sample.id + ": " + v);
    }
    const int k = sample.response.num_events();
    std::vector<int> expected(static_cast<size_t>(k));
    std::iota(expected.begin(), expected.end(), 0);
    if (sample.response.ref_indices() != expected) {
        throw InvariantError("sample " + sample.id + ": synthesis needs exactly one answer reference per event");
    }
    Rng rng(seed);
    std::string last_error;
    for (int attempt = 0; attempt < cfg.max_attempts; ++attempt) {
        try {
            const Selection sel = choose_factor_and_events(sample, cfg, rng);
            Perturbed p = is_temporal(sel.factor) ? perturb_temporal(sample, sel.factor, sel.events, cfg, rng)
                                                  : perturb_text(sample, sel.factor, sel.events, distorter, rng);
            PreferencePair pair;
            pair.base_id = sample.id;
            pair.num_frames = sample.num_frames();
            pair.preferred = ScoredResponse{sample.response, sample.time_gt};
            pair.dispreferred = std::move(p.response);
            pair.provenance = Provenance{sel.factor, std::move(p.records)};
            const auto violations = validate_pair(pair);
            if (violations.empty()) {
                return pair;
            }
            last_error = violations.front().field + ": " + violations.front().rule;
        } catch (const InfeasiblePerturbation& e) {
            last_error = e.what();
        }
    }
    throw InfeasiblePerturbation("sample " + sample.id + ": no valid perturbation after " +
                                 std::to_string(cfg.max_attempts) + " attempts (last: " + last_error + ")");
}

}  // namespace evigrid::synth
