// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "evigrid/autograd.hpp"
#include "evigrid/rng.hpp"

using namespace evigrid;

namespace {

Tensor randn(int r, int c, Rng& rng) {
    Tensor t(r, c);
    for (auto& v : t.data) v = rng.normal();
    return t;
}

}  // namespace

TEST_CASE("logistic forward and backward at the origin") {
    Graph g;
    ParamStore st;
    st.add("x", Tensor::scalar(0.0));
    Var y = logistic(g.param(st, "x"));
    CHECK(y.item() == doctest::Approx(0.5).epsilon(1e-15));
    g.backward(y);
    CHECK(st.at("x").grad.data[0] == doctest::Approx(0.25).epsilon(1e-15));
}

TEST_CASE("logistic of 4 matches the closed form") {
    Graph g;
    Var y = logistic(g.constant(Tensor::scalar(4.0)));
    const double oracle = 1.0 / (1.0 + std::exp(-4.0));
    CHECK(std::abs(y.item() - oracle) < 1e-15);
    CHECK(y.item() == doctest::Approx(0.9820).epsilon(1e-4));
}

TEST_CASE("sum of a parameter has an all-ones gradient") {
    Rng rng(3);
    ParamStore st;
    st.add("p", randn(3, 4, rng));
    Graph g;
    g.backward(sum(g.param(st, "p")));
    for (double v : st.at("p").grad.data) CHECK(v == 1.0);
}

TEST_CASE("matmul rejects mismatched inner dimensions") {
    Graph g;
    Var a = g.constant(Tensor(2, 3));
    Var b = g.constant(Tensor(2, 2));
    CHECK_THROWS_AS(matmul(a, b), ShapeError);
}

TEST_CASE("backward needs a scalar root") {
    Graph g;
    Var a = g.constant(Tensor(2, 2, 1.0));
    CHECK_THROWS_AS(g.backward(a), NotScalarError);
}

TEST_CASE("grad_check is tight on a quadratic") {
    Rng rng(5);
    ParamStore st;
    st.add("p", randn(4, 3, rng));
    const double err = grad_check(
        [](Graph& g, ParamStore& s) {
            Var p = g.param(s, "p");
            return scale(sum(mul(p, p)), 0.5);
        },
        st, 1e-5, 1);
    CHECK(err < 1e-9);
}

TEST_CASE("grad_check over the op family") {
    Rng rng(11);
    ParamStore st;
    st.add("a", randn(3, 4, rng));
    st.add("b", randn(4, 2, rng));
    st.add("c", randn(1, 2, rng));
    st.add("d", randn(3, 2, rng));
    const double err = grad_check(
        [](Graph& g, ParamStore& s) {
            Var a = g.param(s, "a"), b = g.param(s, "b"), c = g.param(s, "c"), d = g.param(s, "d");
            Var h = add(matmul(a, b), c);
            h = tanh(h);
            h = mul(h, logistic(d));
            Var x = concat_rows(std::vector<Var>{h, gelu(d)});
            x = rmsnorm_rows(x);
            Var lp = log_softmax_rows(x);
            const std::vector<int> cols = {0, 1, 1, 0, 1, 0};
            Var picked = pick(lp, cols);
            Var attn = causal_softmax_rows(matmul_nt(a, a), 1);
            Var extra = mean(log_clamped(affine(logistic(slice_rows(d, 1, 2)), 1.0, 0.1), 1e-7, 1.0));
            return add(add(mean(picked), scale(sum(mean_rows(attn)), 0.3)), add(extra, mean(log_sigmoid(d))));
        },
        st, 1e-6, 2);
    CHECK(err < 1e-7);
}

TEST_CASE("adam: first step moves by the learning rate; zero grad leaves values") {
    ParamStore st;
    st.add("w", Tensor::scalar(1.0));
    st.at("w").grad = Tensor::scalar(1.0);
    AdamConfig cfg;
    cfg.lr = 0.1;
    adam_step(st, cfg);
    CHECK(st.at("w").value.data[0] == doctest::Approx(0.9).epsilon(1e-6));
    CHECK(st.step() == 1);

    ParamStore z;
    z.add("w", Tensor::scalar(2.0));
    adam_step(z, cfg);
    CHECK(z.at("w").value.data[0] == 2.0);
    CHECK(z.step() == 1);
}

TEST_CASE("checkpoint round trip stores float32 values") {
    Rng rng(9);
    ParamStore st;
    st.add("a.w", randn(3, 5, rng));
    st.add("b", randn(1, 7, rng));
    st.set_step(42);
    const auto path = (std::filesystem::temp_directory_path() / "evigrid_ckpt_test.ckpt").string();
    save_checkpoint(path, st, R"({"note":"x"})");
    std::string meta;
    ParamStore back = load_checkpoint(path, &meta);
    CHECK(back.step() == 42);
    CHECK(meta.find("note") != std::string::npos);
    for (const auto& [name, p] : st.params()) {
        const auto& q = back.at(name);
        REQUIRE(q.value.same_shape(p.value));
        for (size_t i = 0; i < p.value.size(); ++i) {
            CHECK(q.value.data[i] == static_cast<double>(static_cast<float>(p.value.data[i])));
        }
    }
    std::filesystem::remove(path);
    CHECK_THROWS_AS(load_checkpoint(path), IoError);
}

TEST_CASE("the logistic sign-flip hook breaks grad_check") {
    ParamStore st;
    st.add("x", Tensor(1, 3, std::vector<double>{0.3, -1.0, 2.0}));
    auto fn = [](Graph& g, ParamStore& s) { return sum(logistic(g.param(s, "x"))); };
    CHECK(grad_check(fn, st, 1e-6, 1) < 1e-8);
    testing_hooks::set_flip_logistic_grad(true);
    const double broken = grad_check(fn, st, 1e-6, 1);
    testing_hooks::set_flip_logistic_grad(false);
    CHECK(broken > 1e-2);
}
