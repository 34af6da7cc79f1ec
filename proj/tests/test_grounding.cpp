// SPDX-License-Identifier: Apache-2.0

#include <cmath>

#include "doctest.h"
#include "evigrid/grounding.hpp"
#include "evigrid/rng.hpp"

using namespace evigrid;
using namespace evigrid::grounding;

namespace {

SimilarityProfile profile(std::vector<double> sims) {
    SimilarityProfile p;
    p.sims = std::move(sims);
    return p;
}

InferSelect infer(double ratio) {
    InferSelect s;
    s.cfg.salient_ratio = ratio;
    return s;
}

}  // namespace

TEST_CASE("frame_similarities: scalar case and zero query") {
    Graph g;
    Var q = g.constant(Tensor::row({2.0}));
    Var f = g.constant(Tensor(3, 1, std::vector<double>{2.0, 0.0, -2.0}));
    const SimilarityProfile p = frame_similarities(q, f);
    REQUIRE(p.num_frames() == 3);
    CHECK(std::abs(p.sims[0] - 1.0 / (1.0 + std::exp(-4.0))) < 1e-15);
    CHECK(p.sims[1] == 0.5);
    CHECK(std::abs(p.sims[2] - 1.0 / (1.0 + std::exp(4.0))) < 1e-15);
    CHECK(p.sims[0] == doctest::Approx(0.9820).epsilon(1e-4));
    CHECK(p.sims[2] == doctest::Approx(0.0180).epsilon(1e-3));

    Var zero = g.constant(Tensor(1, 4, 0.0));
    Rng rng(1);
    Tensor frames(5, 4);
    for (auto& v : frames.data) v = rng.normal();
    for (double s : frame_similarities(zero, g.constant(frames)).sims) CHECK(s == 0.5);
}

TEST_CASE("frame_similarities scales dot products by 1/sqrt(C)") {
    Graph g;
    Var q = g.constant(Tensor::row({1.0, 1.0, 1.0, 1.0}));
    Var f = g.constant(Tensor::row({1.0, 1.0, 1.0, 1.0}));
    CHECK(std::abs(frame_similarities(q, f).sims[0] - 1.0 / (1.0 + std::exp(-2.0))) < 1e-15);
}

TEST_CASE("select_salient rules") {
    CHECK(select_salient(profile({0.9, 0.2, 0.6}), infer(0.6)) == std::vector<int>{0, 2});
    CHECK(select_salient(profile({0.4, 0.4, 0.4, 0.4}), infer(0.6)) == std::vector<int>{0, 1, 2, 3});
    CHECK(select_salient(profile(std::vector<double>(8, 0.3)), TrainSelect{Interval{2, 5}}) ==
          std::vector<int>{2, 3, 4, 5});
    CHECK_THROWS_AS(select_salient(profile(std::vector<double>(4, 0.3)), TrainSelect{Interval{2, 5}}),
                    IntervalOutOfRange);
}

TEST_CASE("select_salient in infer mode is never empty and always holds the argmax") {
    Rng rng(17);
    for (int n = 0; n < 200; ++n) {
        std::vector<double> s(static_cast<size_t>(rng.uniform_int(1, 12)));
        for (auto& v : s) v = rng.uniform(0.001, 0.999);
        const SimilarityProfile p = profile(s);
        const auto sal = select_salient(p, infer(rng.uniform(0.05, 1.0)));
        REQUIRE(!sal.empty());
        CHECK(std::find(sal.begin(), sal.end(), p.argmax()) != sal.end());
        CHECK(std::is_sorted(sal.begin(), sal.end()));
    }
}

TEST_CASE("aggregate_semantics adds the salient mean") {
    Graph g;
    Var evi = g.constant(Tensor::row({0.0, 0.0}));
    Var frames = g.constant(Tensor(3, 2, std::vector<double>{1, 1, 9, 9, 3, 3}));
    const std::vector<int> sal = {0, 2};
    CHECK(aggregate_semantics(evi, frames, sal).value().data == std::vector<double>{2.0, 2.0});
    const std::vector<int> one = {1};
    Var e2 = g.constant(Tensor::row({0.5, -1.0}));
    CHECK(aggregate_semantics(e2, frames, one).value().data == std::vector<double>{9.5, 8.0});
    CHECK_THROWS_AS(aggregate_semantics(evi, frames, std::span<const int>{}), EmptySalientError);
}

TEST_CASE("intervals_from_salient modes") {
    const auto p1 = profile({0.5, 0.9, 0.6, 0.1, 0.1});
    const std::vector<int> run = {0, 1, 2};
    CHECK(intervals_from_salient(run, p1, IntervalMode::RunOfArgmax) == Interval{0, 2});
    CHECK(intervals_from_salient(run, p1, IntervalMode::FullSpan) == Interval{0, 2});

    const auto p2 = profile({0.7, 0.7, 0.1, 0.1, 0.95, 0.8});
    const std::vector<int> split = {0, 1, 4, 5};
    CHECK(intervals_from_salient(split, p2, IntervalMode::RunOfArgmax) == Interval{4, 5});
    CHECK(intervals_from_salient(split, p2, IntervalMode::FullSpan) == Interval{0, 5});

    const std::vector<int> single = {3};
    CHECK(intervals_from_salient(single, profile({0.1, 0.1, 0.1, 0.9}), IntervalMode::RunOfArgmax) == Interval{3, 3});
}

TEST_CASE("project_evidence degenerate weights") {
    const int c = 3;
    ParamStore st;
    EvidenceProjection::add_params(st, c, [] { return 0.0; });
    Graph g;
    auto proj = EvidenceProjection::bind(g, st);
    Var h = g.constant(Tensor::row({0.3, -2.0, 1.0}));
    for (double v : project_evidence(h, proj).value().data) CHECK(v == 0.0);

    // Zero first layer, identity second layer: output is the second bias.
    auto& w2 = st.at(std::string(EvidenceProjection::kPrefix) + ".w2").value;
    for (int i = 0; i < c; ++i) w2(i, i) = 1.0;
    st.at(std::string(EvidenceProjection::kPrefix) + ".b2").value = Tensor::row({0.1, 0.2, 0.3});
    Graph g2;
    auto proj2 = EvidenceProjection::bind(g2, st);
    const auto out = project_evidence(g2.constant(Tensor::row({5.0, 5.0, 5.0})), proj2).value().data;
    CHECK(out == std::vector<double>{0.1, 0.2, 0.3});
}
