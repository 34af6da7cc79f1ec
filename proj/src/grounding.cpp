// SPDX-License-Identifier: Apache-2.0

#include "evigrid/grounding.hpp"

#include <algorithm>
#include <cmath>

namespace evigrid::grounding {

int SimilarityProfile::argmax() const {
    if (sims.empty()) {
        throw ShapeError("argmax of an empty similarity profile");
    }
    return static_cast<int>(std::max_element(sims.begin(), sims.end()) - sims.begin());
}

void GroundingConfig::validate() const {
    if (!(salient_ratio > 0.0 && salient_ratio <= 1.0)) {
        throw ConfigError("grounding.salient_ratio must lie in (0, 1], got " + std::to_string(salient_ratio));
    }
}

void EvidenceProjection::add_params(ParamStore& store, int channels, const std::function<double()>& init) {
    auto filled = [&](int r, int c) {
        Tensor t(r, c);
        for (double& v : t.data) {
            v = init();
        }
        return t;
    };
    const std::string p = kPrefix;
    store.add(p + ".w1", filled(channels, channels));
    store.add(p + ".b1", Tensor(1, channels));
    store.add(p + ".w2", filled(channels, channels));
    store.add(p + ".b2", Tensor(1, channels));
}

EvidenceProjection EvidenceProjection::bind(Graph& g, ParamStore& store) {
    const std::string p = kPrefix;
    return {g.param(store, p + ".w1"), g.param(store, p + ".b1"), g.param(store, p + ".w2"),
            g.param(store, p + ".b2")};
}

Var project_evidence(Var evi_hidden, const EvidenceProjection& proj) {
    Var h = tanh(add(matmul(evi_hidden, proj.w1), proj.b1));
    return add(matmul(h, proj.w2), proj.b2);
}

SimilarityProfile frame_similarities(Var query, Var frames) {
    if (query.rows() != 1 || query.cols() != frames.cols()) {
        throw ShapeError("frame_similarities: query " + std::to_string(query.rows()) + "x" +
                         std::to_string(query.cols()) + " against frames with C=" + std::to_string(frames.cols()));
    }
    const double inv_sqrt_c = 1.0 / std::sqrt(static_cast<double>(frames.cols()));
    Var s = logistic(scale(matmul_nt(frames, query), inv_sqrt_c));
    SimilarityProfile p;
    p.sims = s.value().data;
    p.var = s;
    return p;
}

std::vector<int> select_salient(const SimilarityProfile& profile, const SelectMode& mode) {
    const int t_count = profile.num_frames();
    if (t_count == 0) {
        throw ShapeError("select_salient on an empty profile");
    }
    std::vector<int> out;
    if (const auto* train = std::get_if<TrainSelect>(&mode)) {
        if (!train->gt.valid_for(t_count)) {
            throw IntervalOutOfRange("ground-truth interval [" + std::to_string(train->gt.start) + ", " +
                                     std::to_string(train->gt.end) + "] outside T=" + std::to_string(t_count));
        }
        for (int t = train->gt.start; t <= train->gt.end; ++t) {
            out.push_back(t);
        }
        return out;
    }
    const auto& cfg = std::get<InferSelect>(mode).cfg;
    cfg.validate();
    const double peak = *std::max_element(profile.sims.begin(), profile.sims.end());
    const double threshold = cfg.salient_ratio * peak;
    for (int t = 0; t < t_count; ++t) {
        if (profile.sims[static_cast<size_t>(t)] >= threshold) {
            out.push_back(t);
        }
    }
    return out;
}

Var aggregate_semantics(Var evi, Var frames, std::span<const int> salient) {
    if (salient.empty()) {
        throw EmptySalientError("aggregate_semantics needs at least one salient frame");
    }
    if (evi.rows() != 1 || evi.cols() != frames.cols()) {
        throw ShapeError("aggregate_semantics: evidence feature does not match frame width");
    }
    return add(evi, mean_rows(gather_rows(frames, salient)));
}

Interval intervals_from_salient(std::span<const int> salient, const SimilarityProfile& profile, IntervalMode mode) {
    if (salient.empty()) {
        throw EmptySalientError("intervals_from_salient needs at least one salient frame");
    }
    std::vector<int> s(salient.begin(), salient.end());
    std::sort(s.begin(), s.end());
    if (mode == IntervalMode::FullSpan) {
        return Interval{s.front(), s.back()};
    }
    // Anchor on the most similar salient frame; this is the global argmax
    // whenever the salient set came from Infer-mode selection.
    int anchor = s.front();
    for (int t : s) {
        if (t < profile.num_frames() && profile.sims[static_cast<size_t>(t)] > profile.sims[static_cast<size_t>(anchor)]) {
            anchor = t;
        }
    }
    auto it = std::find(s.begin(), s.end(), anchor);
    auto lo = it;
    while (lo != s.begin() && *(lo - 1) == *lo - 1) {
        --lo;
    }
    auto hi = it;
    while (hi + 1 != s.end() && *(hi + 1) == *hi + 1) {
        ++hi;
    }
    return Interval{*lo, *hi};
}

}  // namespace evigrid::grounding
