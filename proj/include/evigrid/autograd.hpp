// SPDX-License-Identifier: Apache-2.0
//
// Dense rank-2 arrays with reverse-mode differentiation.
//
// A Graph is a tape: every op appends a node holding its value and a closure
// that scatters the output adjoint into its parents. The graph is rebuilt for
// every training step; parameters live in a ParamStore and enter a graph as
// leaves whose gradients flow back into the store on backward().

#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "evigrid/errors.hpp"

namespace evigrid {

struct Tensor {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    Tensor() = default;
    Tensor(int r, int c, double fill = 0.0);
    Tensor(int r, int c, std::vector<double> values);

    static Tensor row(std::vector<double> values);
    static Tensor column(std::vector<double> values);
    static Tensor scalar(double v) { return Tensor(1, 1, v); }

    double& operator()(int r, int c) { return data[static_cast<size_t>(r) * cols + c]; }
    double operator()(int r, int c) const { return data[static_cast<size_t>(r) * cols + c]; }
    size_t size() const { return data.size(); }
    bool same_shape(const Tensor& o) const { return rows == o.rows && cols == o.cols; }
    bool empty() const { return data.empty(); }

    bool operator==(const Tensor&) const = default;
};

struct Param {
    Tensor value;
    Tensor grad;
    Tensor m;
    Tensor v;
};

// Named parameters with gradient buffers and Adam moments. Names are unique
// and shapes are fixed once added. Iteration order is the name order.
class ParamStore {
public:
    Param& add(const std::string& name, Tensor init);
    Param& at(const std::string& name);
    const Param& at(const std::string& name) const;
    bool contains(const std::string& name) const { return params_.count(name) != 0; }

    std::map<std::string, Param>& params() { return params_; }
    const std::map<std::string, Param>& params() const { return params_; }

    size_t parameter_count() const;
    void zero_grad();

    int64_t step() const { return step_; }
    void set_step(int64_t s) { step_ = s; }

private:
    std::map<std::string, Param> params_;
    int64_t step_ = 0;
};

class Graph;

// Handle to a node in a Graph. Cheap to copy; valid while the graph lives.
struct Var {
    Graph* graph = nullptr;
    int id = -1;

    const Tensor& value() const;
    const Tensor& grad() const;
    double item() const;
    int rows() const { return value().rows; }
    int cols() const { return value().cols; }
    bool valid() const { return graph != nullptr; }
};

class Graph {
public:
    using BackwardFn = std::function<void(const Tensor& out_adj, std::vector<Tensor>& adj)>;

    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Var constant(Tensor value);
    Var param(ParamStore& store, const std::string& name);

    // Appends a node. `parents` are node ids; `fn` may be empty for leaves.
    Var push(Tensor value, std::string_view op, std::vector<int> parents, BackwardFn fn);

    const Tensor& value(int id) const { return nodes_[static_cast<size_t>(id)].value; }
    const Tensor& grad(int id) const;
    std::string_view op(int id) const { return nodes_[static_cast<size_t>(id)].op; }
    const std::vector<int>& parents(int id) const { return nodes_[static_cast<size_t>(id)].parents; }
    size_t size() const { return nodes_.size(); }

    // Accumulates d(root)/d(node) into every reachable node's grad and into
    // the gradient buffer of every parameter leaf. Repeated calls add up.
    void backward(Var root);

private:
    struct Node {
        Tensor value;
        Tensor grad;  // lazily allocated; empty means zero
        std::string_view op;
        std::vector<int> parents;
        BackwardFn fn;
        Param* param = nullptr;
    };
    std::vector<Node> nodes_;
    mutable Tensor zero_scratch_;
};

// ---- op family -------------------------------------------------------------

Var matmul(Var a, Var b);       // (m×k)(k×n)
Var matmul_nt(Var a, Var b);    // (m×k)(n×k)^T
Var add(Var a, Var b);          // same shape, or b is 1×n broadcast over rows
Var sub(Var a, Var b);          // same shape
Var mul(Var a, Var b);          // elementwise; b may be 1×n broadcast over rows
Var scale(Var a, double s);
Var affine(Var a, double s, double shift);  // s·a + shift
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var slice_rows(Var a, int begin, int count);
Var gather_rows(Var a, std::span<const int> rows);
Var logistic(Var a);
Var log_sigmoid(Var a);
Var tanh(Var a);
Var gelu(Var a);
Var abs(Var a);                 // subgradient 0 at 0
Var log(Var a);
// log(clamp(a, lo, hi)); the gradient is zero where the clamp is active.
Var log_clamped(Var a, double lo, double hi);
Var log_softmax_rows(Var a);
// Row-wise softmax where row i sees columns [0, visible0 + i).
Var causal_softmax_rows(Var a, int visible0);
Var rmsnorm_rows(Var a, double eps = 1e-6);
Var pick(Var a, std::span<const int> cols);  // out[i] = a[i, cols[i]], m×1
Var sum(Var a);
Var mean(Var a);
Var mean_rows(Var a);           // column means, 1×n

// ---- optimisation ---------------------------------------------------------

struct AdamConfig {
    double lr = 3e-3;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip_norm = 0.0;  // 0 disables global-norm clipping
    double weight_decay = 0.0;  // decoupled, scaled by lr
};

double global_grad_norm(const ParamStore& store);
// Bias-corrected Adam with optional decoupled weight decay; advances the step counter and zeroes gradients.
void adam_step(ParamStore& store, const AdamConfig& cfg);
// Plain gradient descent with the same optional clipping; advances the step counter and zeroes gradients.
void sgd_step(ParamStore& store, double lr, double clip_norm = 0.0);

enum class OptimizerKind { Sgd, Adam };

struct OptimizerConfig {
    OptimizerKind kind = OptimizerKind::Adam;
    AdamConfig adam;  // Sgd reads only lr and clip_norm
};

void optimizer_step(ParamStore& store, const OptimizerConfig& cfg);

using LossFn = std::function<Var(Graph&, ParamStore&)>;

// Max over a random coordinate subsample (at least `min_coords`, or all) of
// |analytic - central difference| / max(1, |analytic|, |numeric|).
double grad_check(const LossFn& loss_fn, ParamStore& store, double h, uint64_t seed,
                  int min_coords = 64);

// ---- persistence ----------------------------------------------------------

inline constexpr int kCheckpointVersion = 1;

// JSON header line (version, names, shapes, step, free-form meta) followed by
// little-endian float32 arrays in header order.
void save_checkpoint(const std::string& path, const ParamStore& store, const std::string& meta_json);
ParamStore load_checkpoint(const std::string& path, std::string* meta_json = nullptr);

namespace testing_hooks {
// Mutation canary for gradcheck: flips the sign of the logistic backward.
void set_flip_logistic_grad(bool on);
}  // namespace testing_hooks

}  // namespace evigrid
