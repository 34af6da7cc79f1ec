// SPDX-License-Identifier: Apache-2.0

#include "evigrid/autograd.hpp"

#include <algorithm>
#include <atomic>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "json.hpp"

namespace evigrid {

namespace {

std::atomic<bool> g_flip_logistic_grad{false};

std::string shape_str(const Tensor& t) {
    return std::to_string(t.rows) + "x" + std::to_string(t.cols);
}

void check_finite(const Tensor& t, std::string_view op) {
    for (double v : t.data) {
        if (!std::isfinite(v)) {
            throw NonFiniteError("op '" + std::string(op) + "' produced a non-finite value");
        }
    }
}

Tensor& ensure(std::vector<Tensor>& adj, int id, const Tensor& like) {
    Tensor& t = adj[static_cast<size_t>(id)];
    if (t.empty()) {
        t = Tensor(like.rows, like.cols);
    }
    return t;
}

Graph& graph_of(Var a) {
    if (a.graph == nullptr) {
        throw ShapeError("use of an unbound Var");
    }
    return *a.graph;
}

Graph& graph_of(Var a, Var b) {
    if (a.graph != b.graph || a.graph == nullptr) {
        throw ShapeError("operands belong to different graphs");
    }
    return *a.graph;
}

// C += A·B, with optional transposes. Plain i-k-j loops; sizes here are tiny.
void gemm_acc(const Tensor& a, bool ta, const Tensor& b, bool tb, Tensor& c) {
    const int m = ta ? a.cols : a.rows;
    const int k = ta ? a.rows : a.cols;
    const int n = tb ? b.rows : b.cols;
    for (int i = 0; i < m; ++i) {
        double* crow = &c.data[static_cast<size_t>(i) * n];
        for (int p = 0; p < k; ++p) {
            const double av = ta ? a(p, i) : a(i, p);
            if (av == 0.0) {
                continue;
            }
            if (!tb) {
                const double* brow = &b.data[static_cast<size_t>(p) * n];
                for (int j = 0; j < n; ++j) {
                    crow[j] += av * brow[j];
                }
            } else {
                for (int j = 0; j < n; ++j) {
                    crow[j] += av * b(j, p);
                }
            }
        }
    }
}

template <class F, class D>
Var unary(Var a, std::string_view op, F f, D dfdx) {
    Graph& g = graph_of(a);
    const Tensor& x = a.value();
    Tensor out(x.rows, x.cols);
    for (size_t i = 0; i < x.size(); ++i) {
        out.data[i] = f(x.data[i]);
    }
    const int ia = a.id;
    Graph* gp = &g;
    return g.push(std::move(out), op, {ia}, [gp, ia, dfdx](const Tensor& adj_out, std::vector<Tensor>& adj) {
        const Tensor& xv = gp->value(ia);
        Tensor& ga = ensure(adj, ia, xv);
        for (size_t i = 0; i < xv.size(); ++i) {
            ga.data[i] += adj_out.data[i] * dfdx(xv.data[i]);
        }
    });
}

double sigmoid(double x) {
    if (x >= 0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

}  // namespace

// ---- Tensor ----------------------------------------------------------------

Tensor::Tensor(int r, int c, double fill) : rows(r), cols(c), data(static_cast<size_t>(r) * c, fill) {
    if (r < 0 || c < 0) {
        throw ShapeError("negative tensor dimension");
    }
}

Tensor::Tensor(int r, int c, std::vector<double> values) : rows(r), cols(c), data(std::move(values)) {
    if (r < 0 || c < 0 || data.size() != static_cast<size_t>(r) * c) {
        throw ShapeError("tensor data does not match " + std::to_string(r) + "x" + std::to_string(c));
    }
}

Tensor Tensor::row(std::vector<double> values) {
    const int n = static_cast<int>(values.size());
    return Tensor(1, n, std::move(values));
}

Tensor Tensor::column(std::vector<double> values) {
    const int n = static_cast<int>(values.size());
    return Tensor(n, 1, std::move(values));
}

// ---- ParamStore ------------------------------------------------------------

Param& ParamStore::add(const std::string& name, Tensor init) {
    if (params_.count(name) != 0) {
        throw ShapeError("duplicate parameter name '" + name + "'");
    }
    Param p;
    p.grad = Tensor(init.rows, init.cols);
    p.m = Tensor(init.rows, init.cols);
    p.v = Tensor(init.rows, init.cols);
    p.value = std::move(init);
    return params_.emplace(name, std::move(p)).first->second;
}

Param& ParamStore::at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) {
        throw ShapeError("unknown parameter '" + name + "'");
    }
    return it->second;
}

const Param& ParamStore::at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) {
        throw ShapeError("unknown parameter '" + name + "'");
    }
    return it->second;
}

size_t ParamStore::parameter_count() const {
    size_t n = 0;
    for (const auto& [_, p] : params_) {
        n += p.value.size();
    }
    return n;
}

void ParamStore::zero_grad() {
    for (auto& [_, p] : params_) {
        std::fill(p.grad.data.begin(), p.grad.data.end(), 0.0);
    }
}

// ---- Var / Graph -----------------------------------------------------------

const Tensor& Var::value() const { return graph_of(*this).value(id); }
const Tensor& Var::grad() const { return graph_of(*this).grad(id); }

double Var::item() const {
    const Tensor& t = value();
    if (t.size() != 1) {
        throw NotScalarError("item() on a " + shape_str(t) + " value");
    }
    return t.data[0];
}

const Tensor& Graph::grad(int id) const {
    const Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.empty() && !n.value.empty()) {
        // Untouched nodes have zero gradient of the node's shape.
        zero_scratch_ = Tensor(n.value.rows, n.value.cols);
        return zero_scratch_;
    }
    return n.grad;
}

Var Graph::push(Tensor value, std::string_view op, std::vector<int> parents, BackwardFn fn) {
    check_finite(value, op);
    Node n;
    n.value = std::move(value);
    n.op = op;
    n.parents = std::move(parents);
    n.fn = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size() - 1)};
}

Var Graph::constant(Tensor value) { return push(std::move(value), "const", {}, nullptr); }

Var Graph::param(ParamStore& store, const std::string& name) {
    Param& p = store.at(name);
    Var v = push(p.value, "param", {}, nullptr);
    nodes_.back().param = &p;
    return v;
}

void Graph::backward(Var root) {
    if (root.graph != this) {
        throw ShapeError("backward() root belongs to another graph");
    }
    const Tensor& rv = value(root.id);
    if (rv.size() != 1) {
        throw NotScalarError("backward() needs a scalar root, got " + shape_str(rv));
    }
    std::vector<Tensor> adj(static_cast<size_t>(root.id) + 1);
    adj[static_cast<size_t>(root.id)] = Tensor(1, 1, 1.0);
    for (int id = root.id; id >= 0; --id) {
        const Tensor& a = adj[static_cast<size_t>(id)];
        if (a.empty()) {
            continue;
        }
        Node& n = nodes_[static_cast<size_t>(id)];
        if (n.fn) {
            n.fn(a, adj);
        }
    }
    for (int id = 0; id <= root.id; ++id) {
        Tensor& a = adj[static_cast<size_t>(id)];
        if (a.empty()) {
            continue;
        }
        Node& n = nodes_[static_cast<size_t>(id)];
        if (n.grad.empty()) {
            n.grad = Tensor(n.value.rows, n.value.cols);
        }
        for (size_t i = 0; i < a.size(); ++i) {
            n.grad.data[i] += a.data[i];
        }
        if (n.param != nullptr) {
            for (size_t i = 0; i < a.size(); ++i) {
                n.param->grad.data[i] += a.data[i];
            }
        }
    }
}

// ---- ops -------------------------------------------------------------------

Var matmul(Var a, Var b) {
    Graph& g = graph_of(a, b);
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    if (x.cols != y.rows) {
        throw ShapeError("matmul " + shape_str(x) + " by " + shape_str(y));
    }
    Tensor out(x.rows, y.cols);
    gemm_acc(x, false, y, false, out);
    const int ia = a.id, ib = b.id;
    Graph* gp = &g;
    return g.push(std::move(out), "matmul", {ia, ib}, [gp, ia, ib](const Tensor& go, std::vector<Tensor>& adj) {
        const Tensor& xv = gp->value(ia);
        const Tensor& yv = gp->value(ib);
        gemm_acc(go, false, yv, true, ensure(adj, ia, xv));
        gemm_acc(xv, true, go, false, ensure(adj, ib, yv));
    });
}

Var matmul_nt(Var a, Var b) {
    Graph& g = graph_of(a, b);
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    if (x.cols != y.cols) {
        throw ShapeError("matmul_nt " + shape_str(x) + " by transposed " + shape_str(y));
    }
    Tensor out(x.rows, y.rows);
    gemm_acc(x, false, y, true, out);
    const int ia = a.id, ib = b.id;
    Graph* gp = &g;
    return g.push(std::move(out), "matmul_nt", {ia, ib}, [gp, ia, ib](const Tensor& go, std::vector<Tensor>& adj) {
        const Tensor& xv = gp->value(ia);
        const Tensor& yv = gp->value(ib);
        gemm_acc(go, false, yv, false, ensure(adj, ia, xv));
        gemm_acc(go, true, xv, false, ensure(adj, ib, yv));
    });
}

namespace {

enum class Bcast { Same, Row };

Bcast binary_shape(const Tensor& x, const Tensor& y, std::string_view op) {
    if (x.same_shape(y)) {
        return Bcast::Same;
    }
    if (y.rows == 1 && y.cols == x.cols) {
        return Bcast::Row;
    }
    throw ShapeError(std::string(op) + " " + shape_str(x) + " with " + shape_str(y));
}

}  // namespace

Var add(Var a, Var b) {
    Graph& g = graph_of(a, b);
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    const Bcast mode = binary_shape(x, y, "add");
    Tensor out = x;
    for (int i = 0; i < x.rows; ++i) {
        for (int j = 0; j < x.cols; ++j) {
            out(i, j) += mode == Bcast::Same ? y(i, j) : y(0, j);
        }
    }
    const int ia = a.id, ib = b.id;
    Graph* gp = &g;
    return g.push(std::move(out), "add", {ia, ib}, [gp, ia, ib, mode](const Tensor& go, std::vector<Tensor>& adj) {
        Tensor& ga = ensure(adj, ia, gp->value(ia));
        for (size_t i = 0; i < go.size(); ++i) {
            ga.data[i] += go.data[i];
        }
        Tensor& gb = ensure(adj, ib, gp->value(ib));
        if (mode == Bcast::Same) {
            for (size_t i = 0; i < go.size(); ++i) {
                gb.data[i] += go.data[i];
            }
        } else {
            for (int i = 0; i < go.rows; ++i) {
                for (int j = 0; j < go.cols; ++j) {
                    gb(0, j) += go(i, j);
                }
            }
        }
    });
}

Var sub(Var a, Var b) {
    Graph& g = graph_of(a, b);
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    if (!x.same_shape(y)) {
        throw ShapeError("sub " + shape_str(x) + " with " + shape_str(y));
    }
    Tensor out = x;
    for (size_t i = 0; i < out.size(); ++i) {
        out.data[i] -= y.data[i];
    }
    const int ia = a.id, ib = b.id;
    Graph* gp = &g;
    return g.push(std::move(out), "sub", {ia, ib}, [gp, ia, ib](const Tensor& go, std::vector<Tensor>& adj) {
        Tensor& ga = ensure(adj, ia, gp->value(ia));
        Tensor& gb = ensure(adj, ib, gp->value(ib));
        for (size_t i = 0; i < go.size(); ++i) {
            ga.data[i] += go.data[i];
            gb.data[i] -= go.data[i];
        }
    });
}

Var mul(Var a, Var b) {
    Graph& g = graph_of(a, b);
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    const Bcast mode = binary_shape(x, y, "mul");
    Tensor out = x;
    for (int i = 0; i < x.rows; ++i) {
        for (int j = 0; j < x.cols; ++j) {
            out(i, j) *= mode == Bcast::Same ? y(i, j) : y(0, j);
        }
    }
    const int ia = a.id, ib = b.id;
    Graph* gp = &g;
    return g.push(std::move(out), "mul", {ia, ib}, [gp, ia, ib, mode](const Tensor& go, std::vector<Tensor>& adj) {
        const Tensor& xv = gp->value(ia);
        const Tensor& yv = gp->value(ib);
        Tensor& ga = ensure(adj, ia, xv);
        Tensor& gb = ensure(adj, ib, yv);
        for (int i = 0; i < go.rows; ++i) {
            for (int j = 0; j < go.cols; ++j) {
                const double yy = mode == Bcast::Same ? yv(i, j) : yv(0, j);
                ga(i, j) += go(i, j) * yy;
                if (mode == Bcast::Same) {
                    gb(i, j) += go(i, j) * xv(i, j);
                } else {
                    gb(0, j) += go(i, j) * xv(i, j);
                }
            }
        }
    });
}

Var scale(Var a, double s) { return affine(a, s, 0.0); }

Var affine(Var a, double s, double shift) {
    return unary(
        a, "affine", [s, shift](double x) { return s * x + shift; }, [s](double) { return s; });
}

Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) {
        throw ShapeError("concat_rows of nothing");
    }
    Graph& g = graph_of(parts[0]);
    const int cols = parts[0].cols();
    int rows = 0;
    std::vector<int> ids;
    for (const Var& p : parts) {
        graph_of(parts[0], p);
        if (p.cols() != cols) {
            throw ShapeError("concat_rows column mismatch");
        }
        rows += p.rows();
        ids.push_back(p.id);
    }
    Tensor out(rows, cols);
    size_t off = 0;
    for (const Var& p : parts) {
        const Tensor& v = p.value();
        std::copy(v.data.begin(), v.data.end(), out.data.begin() + static_cast<std::ptrdiff_t>(off));
        off += v.size();
    }
    Graph* gp = &g;
    auto parents = ids;
    return g.push(std::move(out), "concat_rows", std::move(parents), [gp, ids](const Tensor& go, std::vector<Tensor>& adj) {
        size_t o = 0;
        for (int id : ids) {
            Tensor& ga = ensure(adj, id, gp->value(id));
            for (size_t i = 0; i < ga.size(); ++i) {
                ga.data[i] += go.data[o + i];
            }
            o += ga.size();
        }
    });
}

Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) {
        throw ShapeError("concat_cols of nothing");
    }
    Graph& g = graph_of(parts[0]);
    const int rows = parts[0].rows();
    int cols = 0;
    std::vector<int> ids;
    for (const Var& p : parts) {
        graph_of(parts[0], p);
        if (p.rows() != rows) {
            throw ShapeError("concat_cols row mismatch");
        }
        cols += p.cols();
        ids.push_back(p.id);
    }
    Tensor out(rows, cols);
    int c0 = 0;
    for (const Var& p : parts) {
        const Tensor& v = p.value();
        for (int i = 0; i < rows; ++i) {
            for (int j = 0; j < v.cols; ++j) {
                out(i, c0 + j) = v(i, j);
            }
        }
        c0 += v.cols;
    }
    Graph* gp = &g;
    auto parents = ids;
    return g.push(std::move(out), "concat_cols", std::move(parents), [gp, ids](const Tensor& go, std::vector<Tensor>& adj) {
        int c = 0;
        for (int id : ids) {
            Tensor& ga = ensure(adj, id, gp->value(id));
            for (int i = 0; i < ga.rows; ++i) {
                for (int j = 0; j < ga.cols; ++j) {
                    ga(i, j) += go(i, c + j);
                }
            }
            c += ga.cols;
        }
    });
}

Var slice_rows(Var a, int begin, int count) {
    Graph& g = graph_of(a);
    const Tensor& x = a.value();
    if (begin < 0 || count < 0 || begin + count > x.rows) {
        throw ShapeError("slice_rows [" + std::to_string(begin) + ", +" + std::to_string(count) + ") of " +
                         shape_str(x));
    }
    Tensor out(count, x.cols);
    std::copy(x.data.begin() + static_cast<std::ptrdiff_t>(begin) * x.cols,
              x.data.begin() + static_cast<std::ptrdiff_t>(begin + count) * x.cols, out.data.begin());
    const int ia = a.id;
    Graph* gp = &g;
    return g.push(std::move(out), "slice_rows", {ia}, [gp, ia, begin](const Tensor& go, std::vector<Tensor>& adj) {
        Tensor& ga = ensure(adj, ia, gp->value(ia));
        const size_t off = static_cast<size_t>(begin) * ga.cols;
        for (size_t i = 0; i < go.size(); ++i) {
            ga.data[off + i] += go.data[i];
        }
    });
}

Var gather_rows(Var a, std::span<const int> rows) {
    Graph& g = graph_of(a);
    const Tensor& x = a.value();
    Tensor out(static_cast<int>(rows.size()), x.cols);
    for (size_t r = 0; r < rows.size(); ++r) {
        if (rows[r] < 0 || rows[r] >= x.rows) {
            throw ShapeError("gather_rows index " + std::to_string(rows[r]) + " out of " + shape_str(x));
        }
        for (int j = 0; j < x.cols; ++j) {
            out(static_cast<int>(r), j) = x(rows[r], j);
        }
    }
    const int ia = a.id;
    Graph* gp = &g;
    std::vector<int> idx(rows.begin(), rows.end());
    return g.push(std::move(out), "gather_rows", {ia}, [gp, ia, idx](const Tensor& go, std::vector<Tensor>& adj) {
        Tensor& ga = ensure(adj, ia, gp->value(ia));
        for (size_t r = 0; r < idx.size(); ++r) {
            for (int j = 0; j < ga.cols; ++j) {
                ga(idx[r], j) += go(static_cast<int>(r), j);
            }
        }
    });
}

Var logistic(Var a) {
    return unary(
        a, "logistic", [](double x) { return sigmoid(x); },
        [](double x) {
            const double s = sigmoid(x);
            const double d = s * (1.0 - s);
            return g_flip_logistic_grad.load(std::memory_order_relaxed) ? -d : d;
        });
}

Var log_sigmoid(Var a) {
    return unary(
        a, "log_sigmoid",
        [](double x) { return x >= 0 ? -std::log1p(std::exp(-x)) : x - std::log1p(std::exp(x)); },
        [](double x) { return 1.0 - sigmoid(x); });
}

Var tanh(Var a) {
    return unary(
        a, "tanh", [](double x) { return std::tanh(x); },
        [](double x) {
            const double t = std::tanh(x);
            return 1.0 - t * t;
        });
}

Var gelu(Var a) {
    // tanh approximation
    constexpr double k = 0.7978845608028654;  // sqrt(2/pi)
    constexpr double c = 0.044715;
    return unary(
        a, "gelu",
        [](double x) { return 0.5 * x * (1.0 + std::tanh(k * (x + c * x * x * x))); },
        [](double x) {
            const double u = k * (x + c * x * x * x);
            const double t = std::tanh(u);
            const double du = k * (1.0 + 3.0 * c * x * x);
            return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
        });
}

Var abs(Var a) {
    return unary(
        a, "abs", [](double x) { return std::fabs(x); },
        [](double x) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Var log(Var a) {
    for (double v : a.value().data) {
        if (!(v > 0.0)) {
            throw NonFiniteError("log of a non-positive value");
        }
    }
    return unary(
        a, "log", [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}

Var log_clamped(Var a, double lo, double hi) {
    return unary(
        a, "log_clamped", [lo, hi](double x) { return std::log(std::clamp(x, lo, hi)); },
        [lo, hi](double x) { return (x < lo || x > hi) ? 0.0 : 1.0 / x; });
}

Var log_softmax_rows(Var a) {
    Graph& g = graph_of(a);
    const Tensor& x = a.value();
    Tensor out(x.rows, x.cols);
    for (int i = 0; i < x.rows; ++i) {
        double mx = -INFINITY;
        for (int j = 0; j < x.cols; ++j) {
            mx = std::max(mx, x(i, j));
        }
        double s = 0.0;
        for (int j = 0; j < x.cols; ++j) {
            s += std::exp(x(i, j) - mx);
        }
        const double lse = mx + std::log(s);
        for (int j = 0; j < x.cols; ++j) {
            out(i, j) = x(i, j) - lse;
        }
    }
    const int ia = a.id;
    Graph* gp = &g;
    const int self = static_cast<int>(g.size());
    return g.push(std::move(out), "log_softmax", {ia}, [gp, ia, self](const Tensor& go, std::vector<Tensor>& adj) {
        const Tensor& y = gp->value(self);
        Tensor& ga = ensure(adj, ia, y);
        for (int i = 0; i < y.rows; ++i) {
            double s = 0.0;
            for (int j = 0; j < y.cols; ++j) {
                s += go(i, j);
            }
            for (int j = 0; j < y.cols; ++j) {
                ga(i, j) += go(i, j) - std::exp(y(i, j)) * s;
            }
        }
    });
}

Var causal_softmax_rows(Var a, int visible0) {
    Graph& g = graph_of(a);
    const Tensor& x = a.value();
    Tensor out(x.rows, x.cols);
    for (int i = 0; i < x.rows; ++i) {
        const int vis = std::min(x.cols, visible0 + i);
        if (vis <= 0) {
            throw ShapeError("causal_softmax_rows row with no visible column");
        }
        double mx = -INFINITY;
        for (int j = 0; j < vis; ++j) {
            mx = std::max(mx, x(i, j));
        }
        double s = 0.0;
        for (int j = 0; j < vis; ++j) {
            out(i, j) = std::exp(x(i, j) - mx);
            s += out(i, j);
        }
        for (int j = 0; j < vis; ++j) {
            out(i, j) /= s;
        }
    }
    const int ia = a.id;
    Graph* gp = &g;
    const int self = static_cast<int>(g.size());
    return g.push(std::move(out), "causal_softmax", {ia}, [gp, ia, self](const Tensor& go, std::vector<Tensor>& adj) {
        const Tensor& y = gp->value(self);
        Tensor& ga = ensure(adj, ia, y);
        for (int i = 0; i < y.rows; ++i) {
            double dot = 0.0;
            for (int j = 0; j < y.cols; ++j) {
                dot += go(i, j) * y(i, j);
            }
            for (int j = 0; j < y.cols; ++j) {
                ga(i, j) += y(i, j) * (go(i, j) - dot);
            }
        }
    });
}

Var rmsnorm_rows(Var a, double eps) {
    Graph& g = graph_of(a);
    const Tensor& x = a.value();
    Tensor out(x.rows, x.cols);
    std::vector<double> inv(static_cast<size_t>(x.rows));
    for (int i = 0; i < x.rows; ++i) {
        double ms = 0.0;
        for (int j = 0; j < x.cols; ++j) {
            ms += x(i, j) * x(i, j);
        }
        ms /= x.cols;
        inv[static_cast<size_t>(i)] = 1.0 / std::sqrt(ms + eps);
        for (int j = 0; j < x.cols; ++j) {
            out(i, j) = x(i, j) * inv[static_cast<size_t>(i)];
        }
    }
    const int ia = a.id;
    Graph* gp = &g;
    return g.push(std::move(out), "rmsnorm", {ia}, [gp, ia, inv](const Tensor& go, std::vector<Tensor>& adj) {
        const Tensor& xv = gp->value(ia);
        Tensor& ga = ensure(adj, ia, xv);
        const int n = xv.cols;
        for (int i = 0; i < xv.rows; ++i) {
            const double r = inv[static_cast<size_t>(i)];
            double dot = 0.0;
            for (int j = 0; j < n; ++j) {
                dot += go(i, j) * xv(i, j);
            }
            const double k = r * r * r * dot / n;
            for (int j = 0; j < n; ++j) {
                ga(i, j) += go(i, j) * r - xv(i, j) * k;
            }
        }
    });
}

Var pick(Var a, std::span<const int> cols) {
    Graph& g = graph_of(a);
    const Tensor& x = a.value();
    if (static_cast<int>(cols.size()) != x.rows) {
        throw ShapeError("pick needs one column per row");
    }
    Tensor out(x.rows, 1);
    for (int i = 0; i < x.rows; ++i) {
        const int c = cols[static_cast<size_t>(i)];
        if (c < 0 || c >= x.cols) {
            throw ShapeError("pick column " + std::to_string(c) + " out of " + shape_str(x));
        }
        out(i, 0) = x(i, c);
    }
    const int ia = a.id;
    Graph* gp = &g;
    std::vector<int> idx(cols.begin(), cols.end());
    return g.push(std::move(out), "pick", {ia}, [gp, ia, idx](const Tensor& go, std::vector<Tensor>& adj) {
        Tensor& ga = ensure(adj, ia, gp->value(ia));
        for (size_t i = 0; i < idx.size(); ++i) {
            ga(static_cast<int>(i), idx[i]) += go(static_cast<int>(i), 0);
        }
    });
}

Var sum(Var a) {
    Graph& g = graph_of(a);
    double s = 0.0;
    for (double v : a.value().data) {
        s += v;
    }
    const int ia = a.id;
    Graph* gp = &g;
    return g.push(Tensor::scalar(s), "sum", {ia}, [gp, ia](const Tensor& go, std::vector<Tensor>& adj) {
        Tensor& ga = ensure(adj, ia, gp->value(ia));
        for (double& v : ga.data) {
            v += go.data[0];
        }
    });
}

Var mean(Var a) {
    const size_t n = a.value().size();
    if (n == 0) {
        throw ShapeError("mean of an empty tensor");
    }
    Graph& g = graph_of(a);
    double s = 0.0;
    for (double v : a.value().data) {
        s += v;
    }
    const int ia = a.id;
    Graph* gp = &g;
    return g.push(Tensor::scalar(s / static_cast<double>(n)), "mean", {ia},
                  [gp, ia, n](const Tensor& go, std::vector<Tensor>& adj) {
                      Tensor& ga = ensure(adj, ia, gp->value(ia));
                      const double d = go.data[0] / static_cast<double>(n);
                      for (double& v : ga.data) {
                          v += d;
                      }
                  });
}

Var mean_rows(Var a) {
    Graph& g = graph_of(a);
    const Tensor& x = a.value();
    if (x.rows == 0) {
        throw ShapeError("mean_rows of zero rows");
    }
    Tensor out(1, x.cols);
    for (int i = 0; i < x.rows; ++i) {
        for (int j = 0; j < x.cols; ++j) {
            out(0, j) += x(i, j);
        }
    }
    for (double& v : out.data) {
        v /= x.rows;
    }
    const int ia = a.id;
    Graph* gp = &g;
    return g.push(std::move(out), "mean_rows", {ia}, [gp, ia](const Tensor& go, std::vector<Tensor>& adj) {
        Tensor& ga = ensure(adj, ia, gp->value(ia));
        for (int i = 0; i < ga.rows; ++i) {
            for (int j = 0; j < ga.cols; ++j) {
                ga(i, j) += go(0, j) / ga.rows;
            }
        }
    });
}

// ---- optimisation ----------------------------------------------------------

double global_grad_norm(const ParamStore& store) {
    double s = 0.0;
    for (const auto& [_, p] : store.params()) {
        for (double g : p.grad.data) {
            s += g * g;
        }
    }
    return std::sqrt(s);
}

void adam_step(ParamStore& store, const AdamConfig& cfg) {
    store.set_step(store.step() + 1);
    const double t = static_cast<double>(store.step());
    const double bc1 = 1.0 - std::pow(cfg.beta1, t);
    const double bc2 = 1.0 - std::pow(cfg.beta2, t);
    double clip = 1.0;
    if (cfg.clip_norm > 0.0) {
        const double norm = global_grad_norm(store);
        if (norm > cfg.clip_norm) {
            clip = cfg.clip_norm / norm;
        }
    }
    for (auto& [_, p] : store.params()) {
        for (size_t i = 0; i < p.value.size(); ++i) {
            const double g = p.grad.data[i] * clip;
            p.m.data[i] = cfg.beta1 * p.m.data[i] + (1.0 - cfg.beta1) * g;
            p.v.data[i] = cfg.beta2 * p.v.data[i] + (1.0 - cfg.beta2) * g * g;
            const double mh = p.m.data[i] / bc1;
            const double vh = p.v.data[i] / bc2;
            p.value.data[i] -= cfg.lr * (mh / (std::sqrt(vh) + cfg.eps) + cfg.weight_decay * p.value.data[i]);
        }
    }
    store.zero_grad();
}

void sgd_step(ParamStore& store, double lr, double clip_norm) {
    store.set_step(store.step() + 1);
    double clip = 1.0;
    if (clip_norm > 0.0) {
        const double norm = global_grad_norm(store);
        if (norm > clip_norm) {
            clip = clip_norm / norm;
        }
    }
    for (auto& [_, p] : store.params()) {
        for (size_t i = 0; i < p.value.size(); ++i) {
            p.value.data[i] -= lr * clip * p.grad.data[i];
        }
    }
    store.zero_grad();
}

void optimizer_step(ParamStore& store, const OptimizerConfig& cfg) {
    if (cfg.kind == OptimizerKind::Sgd) {
        sgd_step(store, cfg.adam.lr, cfg.adam.clip_norm);
    } else {
        adam_step(store, cfg.adam);
    }
}

double grad_check(const LossFn& loss_fn, ParamStore& store, double h, uint64_t seed, int min_coords) {
    if (!(h > 0.0)) {
        throw ShapeError("grad_check step must be positive");
    }
    auto eval = [&]() {
        Graph g;
        const double v = loss_fn(g, store).item();
        if (!std::isfinite(v)) {
            throw NonFiniteError("loss is non-finite at a probe point");
        }
        return v;
    };

    store.zero_grad();
    {
        Graph g;
        Var loss = loss_fn(g, store);
        g.backward(loss);
    }

    struct Coord {
        Param* p;
        size_t i;
    };
    std::vector<Coord> all;
    for (auto& [_, p] : store.params()) {
        for (size_t i = 0; i < p.value.size(); ++i) {
            all.push_back({&p, i});
        }
    }
    std::mt19937_64 rng(seed);
    std::shuffle(all.begin(), all.end(), rng);
    const size_t n = std::min(all.size(), std::max<size_t>(static_cast<size_t>(min_coords), 0));

    double worst = 0.0;
    for (size_t c = 0; c < n; ++c) {
        Param& p = *all[c].p;
        const size_t i = all[c].i;
        const double analytic = p.grad.data[i];
        const double saved = p.value.data[i];
        p.value.data[i] = saved + h;
        const double up = eval();
        p.value.data[i] = saved - h;
        const double down = eval();
        p.value.data[i] = saved;
        const double numeric = (up - down) / (2.0 * h);
        const double denom = std::max({1.0, std::fabs(analytic), std::fabs(numeric)});
        worst = std::max(worst, std::fabs(analytic - numeric) / denom);
    }
    store.zero_grad();
    return worst;
}

// ---- persistence -----------------------------------------------------------

namespace {

void put_f32_le(std::ostream& os, float f) {
    uint32_t u = std::bit_cast<uint32_t>(f);
    unsigned char b[4] = {static_cast<unsigned char>(u & 0xff), static_cast<unsigned char>((u >> 8) & 0xff),
                          static_cast<unsigned char>((u >> 16) & 0xff), static_cast<unsigned char>((u >> 24) & 0xff)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

float get_f32_le(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) {
        throw IoError("truncated checkpoint payload");
    }
    const uint32_t u = static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
                       (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
    return std::bit_cast<float>(u);
}

}  // namespace

void save_checkpoint(const std::string& path, const ParamStore& store, const std::string& meta_json) {
    nlohmann::json header;
    header["format_version"] = kCheckpointVersion;
    header["step"] = store.step();
    header["meta"] = meta_json.empty() ? nlohmann::json::object() : nlohmann::json::parse(meta_json);
    nlohmann::json params = nlohmann::json::array();
    for (const auto& [name, p] : store.params()) {
        params.push_back({{"name", name}, {"shape", {p.value.rows, p.value.cols}}});
    }
    header["params"] = params;

    std::ofstream os(path, std::ios::binary);
    if (!os) {
        throw IoError("cannot write checkpoint '" + path + "'");
    }
    os << header.dump() << '\n';
    for (const auto& [_, p] : store.params()) {
        for (double v : p.value.data) {
            put_f32_le(os, static_cast<float>(v));
        }
    }
    if (!os) {
        throw IoError("failed writing checkpoint '" + path + "'");
    }
}

ParamStore load_checkpoint(const std::string& path, std::string* meta_json) {
    std::ifstream is(path, std::ios::binary);
    if (!is) {
        throw IoError("cannot open checkpoint '" + path + "'");
    }
    std::string line;
    if (!std::getline(is, line)) {
        throw IoError("empty checkpoint '" + path + "'");
    }
    nlohmann::json header;
    try {
        header = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
        throw IoError("bad checkpoint header in '" + path + "': " + e.what());
    }
    if (header.value("format_version", -1) != kCheckpointVersion) {
        throw IoError("unsupported checkpoint version in '" + path + "'");
    }
    ParamStore store;
    for (const auto& entry : header.at("params")) {
        const int r = entry.at("shape").at(0).get<int>();
        const int c = entry.at("shape").at(1).get<int>();
        Tensor t(r, c);
        for (double& v : t.data) {
            v = static_cast<double>(get_f32_le(is));
        }
        store.add(entry.at("name").get<std::string>(), std::move(t));
    }
    store.set_step(header.value("step", int64_t{0}));
    if (meta_json != nullptr) {
        *meta_json = header.contains("meta") ? header["meta"].dump() : "{}";
    }
    return store;
}

namespace testing_hooks {
void set_flip_logistic_grad(bool on) { g_flip_logistic_grad.store(on); }
}  // namespace testing_hooks

}  // namespace evigrid
