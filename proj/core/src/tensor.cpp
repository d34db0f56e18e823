#include "coxvae/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <utility>

namespace coxvae {

std::size_t shape_numel(const Shape& shape) {
    std::size_t n = 1;
    for (std::size_t d : shape) n *= d;
    return n;
}

std::string shape_to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

namespace detail {

struct GraphState {
    std::vector<std::function<void()>> tape;
    std::vector<std::weak_ptr<Node>> nodes;
};

struct Node {
    std::shared_ptr<GraphState> graph;
    std::vector<double> grad;
    bool leaf = false;
};

struct OpAccess {
    static const std::shared_ptr<Node>& node(const Tensor& t) { return t.node_; }
    static const std::shared_ptr<std::vector<double>>& data(const Tensor& t) {
        return t.data_;
    }
    static const std::shared_ptr<GraphState>& state(const Graph& g) {
        return g.state_;
    }

    static std::shared_ptr<GraphState> graph_of(const Tensor& t) {
        return t.node_ ? t.node_->graph : nullptr;
    }

    /// Common graph of a set of operands; null when all are constants.
    /// Mixing two graphs in one operation is a caller bug.
    static std::shared_ptr<GraphState>
    common_graph(std::initializer_list<const Tensor*> ins, const char* op) {
        std::shared_ptr<GraphState> g;
        for (const Tensor* t : ins) {
            auto tg = graph_of(*t);
            if (!tg) continue;
            if (!g) {
                g = tg;
            } else if (g != tg) {
                throw ContractError(std::string(op) +
                                    ": operands belong to different graphs");
            }
        }
        return g;
    }

    static Tensor make_result(Shape shape, std::vector<double> values,
                              const std::shared_ptr<GraphState>& g) {
        Tensor r(std::move(shape), std::move(values));
        if (g) {
            auto n = std::make_shared<Node>();
            n->graph = g;
            n->grad.assign(r.numel(), 0.0);
            g->nodes.push_back(n);
            r.node_ = n;
        }
        return r;
    }

    static void attach_leaf(const std::shared_ptr<GraphState>& g, Tensor& t) {
        auto n = std::make_shared<Node>();
        n->graph = g;
        n->grad.assign(t.numel(), 0.0);
        n->leaf = true;
        g->nodes.push_back(n);
        t.node_ = n;
    }
};

} // namespace detail

using detail::OpAccess;

// ---- Tensor --------------------------------------------------------------

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)),
      data_(std::make_shared<std::vector<double>>(std::move(values))) {
    for (std::size_t d : shape_) {
        if (d == 0)
            throw DimensionError("Tensor: dimension sizes must be positive, got " +
                                 shape_to_string(shape_));
    }
    if (shape_numel(shape_) != data_->size())
        throw DimensionError("Tensor: shape " + shape_to_string(shape_) +
                             " does not match value count " +
                             std::to_string(data_->size()));
}

Tensor Tensor::zeros(Shape shape) {
    std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor Tensor::full(Shape shape, double value) {
    std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::scalar(double value) { return Tensor(Shape{}, {value}); }

std::size_t Tensor::numel() const { return data_ ? data_->size() : 0; }

std::size_t Tensor::dim(std::size_t axis) const {
    if (axis >= shape_.size())
        throw DimensionError("Tensor::dim: axis " + std::to_string(axis) +
                             " out of range for " + shape_to_string(shape_));
    return shape_[axis];
}

std::span<const double> Tensor::values() const {
    if (!data_) throw ContractError("Tensor: undefined");
    return {data_->data(), data_->size()};
}

std::span<double> Tensor::values_mut() {
    if (!data_) throw ContractError("Tensor: undefined");
    return {data_->data(), data_->size()};
}

double Tensor::item() const {
    if (numel() != 1)
        throw ContractError("Tensor::item: tensor " + shape_to_string(shape_) +
                            " is not a scalar");
    return (*data_)[0];
}

double Tensor::at(std::size_t i) const {
    if (!data_ || i >= data_->size())
        throw ContractError("Tensor::at: index out of range");
    return (*data_)[i];
}

double Tensor::at(std::size_t row, std::size_t col) const {
    if (rank() != 2) throw ContractError("Tensor::at(i,j): tensor is not rank-2");
    if (row >= shape_[0] || col >= shape_[1])
        throw ContractError("Tensor::at(i,j): index out of range");
    return (*data_)[row * shape_[1] + col];
}

std::span<const double> Tensor::grad() const {
    if (!node_)
        throw ContractError("Tensor::grad: tensor is not tracked on a graph");
    return {node_->grad.data(), node_->grad.size()};
}

std::span<double> Tensor::grad_mut() {
    if (!node_)
        throw ContractError("Tensor::grad: tensor is not tracked on a graph");
    return {node_->grad.data(), node_->grad.size()};
}

Tensor Tensor::clone_values() const {
    if (!data_) return {};
    return Tensor(shape_, *data_);
}

// ---- Graph ----------------------------------------------------------------

Graph::Graph() : state_(std::make_shared<detail::GraphState>()) {}

Tensor& Graph::watch(Tensor& t) {
    if (!t.defined()) throw ContractError("Graph::watch: undefined tensor");
    OpAccess::attach_leaf(state_, t);
    return t;
}

void Graph::backward(const Tensor& loss) {
    const auto& node = OpAccess::node(loss);
    if (!node || node->graph != state_)
        throw ContractError("Graph::backward: loss is not tracked on this graph");
    if (loss.numel() != 1)
        throw ContractError("Graph::backward: loss must be scalar, got " +
                            shape_to_string(loss.shape()));
    // Interior gradients are scratch space per sweep; only leaves accumulate
    // across repeated backward calls.
    for (auto& wn : state_->nodes) {
        if (auto n = wn.lock(); n && !n->leaf)
            std::fill(n->grad.begin(), n->grad.end(), 0.0);
    }
    node->grad[0] += 1.0;
    for (auto it = state_->tape.rbegin(); it != state_->tape.rend(); ++it) (*it)();
}

void Graph::zero_grad() {
    for (auto& wn : state_->nodes) {
        if (auto n = wn.lock())
            std::fill(n->grad.begin(), n->grad.end(), 0.0);
    }
}

std::size_t Graph::op_count() const { return state_->tape.size(); }

// ---- op helpers -------------------------------------------------------------

namespace {

void require_defined(const Tensor& t, const char* op) {
    if (!t.defined()) throw ContractError(std::string(op) + ": undefined operand");
}

// Elementwise unary with derivative df(x, y) where y = f(x).
template <typename F, typename DF>
Tensor unary_op(const Tensor& a, const char* name, F f, DF df) {
    require_defined(a, name);
    auto g = OpAccess::common_graph({&a}, name);
    const auto av = a.values();
    std::vector<double> out(av.size());
    for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
    Tensor r = OpAccess::make_result(a.shape(), std::move(out), g);
    if (g) {
        auto an = OpAccess::node(a);
        auto rn = OpAccess::node(r);
        auto ad = OpAccess::data(a);
        auto rd = OpAccess::data(r);
        g->tape.push_back([an, rn, ad, rd, df]() {
            for (std::size_t i = 0; i < an->grad.size(); ++i)
                an->grad[i] += df((*ad)[i], (*rd)[i]) * rn->grad[i];
        });
    }
    return r;
}

enum class BinKind { Add, Sub, Mul };

// Elementwise binary; equal shapes, or one operand a scalar broadcast over
// the other.
Tensor binary_op(const Tensor& a, const Tensor& b, BinKind kind, const char* name) {
    require_defined(a, name);
    require_defined(b, name);
    const bool a_scalar = a.numel() == 1;
    const bool b_scalar = b.numel() == 1;
    if (a.shape() != b.shape() && !a_scalar && !b_scalar)
        throw DimensionError(std::string(name) + ": shape mismatch " +
                             shape_to_string(a.shape()) + " vs " +
                             shape_to_string(b.shape()));
    auto g = OpAccess::common_graph({&a, &b}, name);
    const auto av = a.values();
    const auto bv = b.values();
    const std::size_t n = std::max(av.size(), bv.size());
    std::vector<double> out(n);
    for (std::size_t i = 0; i < n; ++i) {
        const double x = av[a_scalar ? 0 : i];
        const double y = bv[b_scalar ? 0 : i];
        switch (kind) {
            case BinKind::Add: out[i] = x + y; break;
            case BinKind::Sub: out[i] = x - y; break;
            case BinKind::Mul: out[i] = x * y; break;
        }
    }
    const Shape& out_shape = av.size() >= bv.size() ? a.shape() : b.shape();
    Tensor r = OpAccess::make_result(out_shape, std::move(out), g);
    if (g) {
        auto an = OpAccess::node(a);
        auto bn = OpAccess::node(b);
        auto rn = OpAccess::node(r);
        auto ad = OpAccess::data(a);
        auto bd = OpAccess::data(b);
        g->tape.push_back([an, bn, rn, ad, bd, kind, a_scalar, b_scalar, n]() {
            for (std::size_t i = 0; i < n; ++i) {
                const double go = rn->grad[i];
                double da = 0.0, db = 0.0;
                switch (kind) {
                    case BinKind::Add: da = go; db = go; break;
                    case BinKind::Sub: da = go; db = -go; break;
                    case BinKind::Mul:
                        da = go * (*bd)[b_scalar ? 0 : i];
                        db = go * (*ad)[a_scalar ? 0 : i];
                        break;
                }
                if (an) an->grad[a_scalar ? 0 : i] += da;
                if (bn) bn->grad[b_scalar ? 0 : i] += db;
            }
        });
    }
    return r;
}

} // namespace

// ---- matrix ops -------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_defined(a, "matmul");
    require_defined(b, "matmul");
    if (a.rank() != 2 || b.rank() != 2)
        throw DimensionError("matmul: operands must be rank-2, got " +
                             shape_to_string(a.shape()) + " and " +
                             shape_to_string(b.shape()));
    const std::size_t m = a.shape()[0], k = a.shape()[1];
    const std::size_t k2 = b.shape()[0], n = b.shape()[1];
    if (k != k2)
        throw DimensionError("matmul: inner dimensions disagree: " +
                             shape_to_string(a.shape()) + " vs " +
                             shape_to_string(b.shape()));
    auto g = OpAccess::common_graph({&a, &b}, "matmul");
    const auto av = a.values();
    const auto bv = b.values();
    std::vector<double> out(m * n, 0.0);
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
            const double aip = av[i * k + p];
            for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aip * bv[p * n + j];
        }
    Tensor r = OpAccess::make_result({m, n}, std::move(out), g);
    if (g) {
        auto an = OpAccess::node(a);
        auto bn = OpAccess::node(b);
        auto rn = OpAccess::node(r);
        auto ad = OpAccess::data(a);
        auto bd = OpAccess::data(b);
        g->tape.push_back([an, bn, rn, ad, bd, m, k, n]() {
            const auto& go = rn->grad;
            if (an) { // dA += G * B^T
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) {
                        const double gij = go[i * n + j];
                        for (std::size_t p = 0; p < k; ++p)
                            an->grad[i * k + p] += gij * (*bd)[p * n + j];
                    }
            }
            if (bn) { // dB += A^T * G
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        const double aip = (*ad)[i * k + p];
                        for (std::size_t j = 0; j < n; ++j)
                            bn->grad[p * n + j] += aip * go[i * n + j];
                    }
            }
        });
    }
    return r;
}

Tensor transpose(const Tensor& m) {
    require_defined(m, "transpose");
    if (m.rank() != 2)
        throw DimensionError("transpose: operand must be rank-2, got " +
                             shape_to_string(m.shape()));
    const std::size_t r = m.shape()[0], c = m.shape()[1];
    auto g = OpAccess::common_graph({&m}, "transpose");
    const auto mv = m.values();
    std::vector<double> out(r * c);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[j * r + i] = mv[i * c + j];
    Tensor t = OpAccess::make_result({c, r}, std::move(out), g);
    if (g) {
        auto mn = OpAccess::node(m);
        auto tn = OpAccess::node(t);
        g->tape.push_back([mn, tn, r, c]() {
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j)
                    mn->grad[i * c + j] += tn->grad[j * r + i];
        });
    }
    return t;
}

// ---- elementwise ops ---------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary_op(a, b, BinKind::Mul, "mul"); }

Tensor add_scalar(const Tensor& a, double c) {
    return unary_op(
        a, "add_scalar", [c](double x) { return x + c; },
        [](double, double) { return 1.0; });
}

Tensor scale(const Tensor& a, double c) {
    return unary_op(
        a, "scale", [c](double x) { return c * x; },
        [c](double, double) { return c; });
}

Tensor negate(const Tensor& a) {
    return unary_op(
        a, "negate", [](double x) { return -x; },
        [](double, double) { return -1.0; });
}

Tensor exp(const Tensor& a) {
    return unary_op(
        a, "exp", [](double x) { return std::exp(x); },
        [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
    for (double x : a.values())
        if (!(x > 0.0))
            throw DomainError("log: input must be strictly positive, got " +
                              std::to_string(x));
    return unary_op(
        a, "log", [](double x) { return std::log(x); },
        [](double x, double) { return 1.0 / x; });
}

Tensor sigmoid(const Tensor& a) {
    return unary_op(
        a, "sigmoid", [](double x) { return stable_sigmoid(x); },
        [](double, double y) { return y * (1.0 - y); });
}

Tensor softplus(const Tensor& a) {
    return unary_op(
        a, "softplus", [](double x) { return stable_softplus(x); },
        [](double x, double) { return stable_sigmoid(x); });
}

Tensor leaky_relu(const Tensor& a, double slope) {
    return unary_op(
        a, "leaky_relu",
        [slope](double x) { return x > 0.0 ? x : slope * x; },
        [slope](double x, double) { return x > 0.0 ? 1.0 : slope; });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
    if (!(lo <= hi)) throw ContractError("clamp: lo must not exceed hi");
    return unary_op(
        a, "clamp",
        [lo, hi](double x) { return std::min(hi, std::max(lo, x)); },
        [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Tensor add_rowvec(const Tensor& m, const Tensor& v) {
    require_defined(m, "add_rowvec");
    require_defined(v, "add_rowvec");
    if (m.rank() != 2 || v.rank() != 1 || m.shape()[1] != v.shape()[0])
        throw DimensionError("add_rowvec: expected [BxN] and [N], got " +
                             shape_to_string(m.shape()) + " and " +
                             shape_to_string(v.shape()));
    const std::size_t rows = m.shape()[0], cols = m.shape()[1];
    auto g = OpAccess::common_graph({&m, &v}, "add_rowvec");
    const auto mv = m.values();
    const auto vv = v.values();
    std::vector<double> out(rows * cols);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j)
            out[i * cols + j] = mv[i * cols + j] + vv[j];
    Tensor r = OpAccess::make_result(m.shape(), std::move(out), g);
    if (g) {
        auto mn = OpAccess::node(m);
        auto vn = OpAccess::node(v);
        auto rn = OpAccess::node(r);
        g->tape.push_back([mn, vn, rn, rows, cols]() {
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t j = 0; j < cols; ++j) {
                    const double go = rn->grad[i * cols + j];
                    if (mn) mn->grad[i * cols + j] += go;
                    if (vn) vn->grad[j] += go;
                }
        });
    }
    return r;
}

// ---- reductions ---------------------------------------------------------------

namespace {

Tensor full_reduce(const Tensor& a, bool take_mean, const char* name) {
    require_defined(a, name);
    auto g = OpAccess::common_graph({&a}, name);
    const auto av = a.values();
    double acc = 0.0;
    for (double x : av) acc += x;
    const double w = take_mean ? 1.0 / static_cast<double>(av.size()) : 1.0;
    Tensor r = OpAccess::make_result(Shape{}, {acc * w}, g);
    if (g) {
        auto an = OpAccess::node(a);
        auto rn = OpAccess::node(r);
        g->tape.push_back([an, rn, w]() {
            const double go = rn->grad[0] * w;
            for (double& x : an->grad) x += go;
        });
    }
    return r;
}

Tensor axis_reduce(const Tensor& a, std::size_t axis, bool take_mean,
                   const char* name) {
    require_defined(a, name);
    if (axis >= a.rank())
        throw DimensionError(std::string(name) + ": axis " + std::to_string(axis) +
                             " out of range for " + shape_to_string(a.shape()));
    if (a.rank() != 2)
        throw DimensionError(std::string(name) +
                             ": axis reduction requires a rank-2 tensor, got " +
                             shape_to_string(a.shape()));
    const std::size_t rows = a.shape()[0], cols = a.shape()[1];
    const std::size_t red = axis == 0 ? rows : cols;
    const std::size_t keep = axis == 0 ? cols : rows;
    auto g = OpAccess::common_graph({&a}, name);
    const auto av = a.values();
    std::vector<double> out(keep, 0.0);
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j)
            out[axis == 0 ? j : i] += av[i * cols + j];
    const double w = take_mean ? 1.0 / static_cast<double>(red) : 1.0;
    if (take_mean)
        for (double& x : out) x *= w;
    Tensor r = OpAccess::make_result({keep}, std::move(out), g);
    if (g) {
        auto an = OpAccess::node(a);
        auto rn = OpAccess::node(r);
        g->tape.push_back([an, rn, rows, cols, axis, w]() {
            for (std::size_t i = 0; i < rows; ++i)
                for (std::size_t j = 0; j < cols; ++j)
                    an->grad[i * cols + j] += w * rn->grad[axis == 0 ? j : i];
        });
    }
    return r;
}

} // namespace

Tensor sum(const Tensor& a) { return full_reduce(a, false, "sum"); }
Tensor sum(const Tensor& a, std::size_t axis) { return axis_reduce(a, axis, false, "sum"); }
Tensor mean(const Tensor& a) { return full_reduce(a, true, "mean"); }
Tensor mean(const Tensor& a, std::size_t axis) { return axis_reduce(a, axis, true, "mean"); }

Tensor logsumexp(const Tensor& x) {
    require_defined(x, "logsumexp");
    if (x.rank() != 1)
        throw DimensionError("logsumexp: operand must be rank-1, got " +
                             shape_to_string(x.shape()));
    const auto xv = x.values();
    if (xv.empty()) throw DomainError("logsumexp: empty input");
    double m = xv[0];
    for (double v : xv) m = std::max(m, v);
    double s = 0.0;
    for (double v : xv) s += std::exp(v - m);
    const double lse = m + std::log(s);
    auto g = OpAccess::common_graph({&x}, "logsumexp");
    Tensor r = OpAccess::make_result(Shape{}, {lse}, g);
    if (g) {
        auto xn = OpAccess::node(x);
        auto rn = OpAccess::node(r);
        auto xd = OpAccess::data(x);
        g->tape.push_back([xn, rn, xd, lse]() {
            const double go = rn->grad[0];
            for (std::size_t i = 0; i < xn->grad.size(); ++i)
                xn->grad[i] += go * std::exp((*xd)[i] - lse);
        });
    }
    return r;
}

Tensor reshape(const Tensor& a, Shape shape) {
    require_defined(a, "reshape");
    if (shape_numel(shape) != a.numel())
        throw DimensionError("reshape: cannot view " + shape_to_string(a.shape()) +
                             " as " + shape_to_string(shape));
    auto g = OpAccess::common_graph({&a}, "reshape");
    std::vector<double> out(a.values().begin(), a.values().end());
    Tensor r = OpAccess::make_result(std::move(shape), std::move(out), g);
    if (g) {
        auto an = OpAccess::node(a);
        auto rn = OpAccess::node(r);
        g->tape.push_back([an, rn]() {
            for (std::size_t i = 0; i < an->grad.size(); ++i)
                an->grad[i] += rn->grad[i];
        });
    }
    return r;
}

Tensor custom_op(
    const std::vector<Tensor>& inputs, Shape out_shape,
    std::vector<double> out_values,
    std::function<void(std::span<const double>,
                       const std::vector<std::span<double>>&)>
        backward) {
    std::shared_ptr<detail::GraphState> g;
    for (const Tensor& t : inputs) {
        require_defined(t, "custom_op");
        auto tg = OpAccess::graph_of(t);
        if (!tg) continue;
        if (!g)
            g = tg;
        else if (g != tg)
            throw ContractError("custom_op: operands belong to different graphs");
    }
    Tensor r = OpAccess::make_result(std::move(out_shape), std::move(out_values), g);
    if (g) {
        std::vector<std::shared_ptr<detail::Node>> in_nodes;
        in_nodes.reserve(inputs.size());
        for (const Tensor& t : inputs) in_nodes.push_back(OpAccess::node(t));
        auto rn = OpAccess::node(r);
        g->tape.push_back([in_nodes, rn, backward = std::move(backward)]() {
            std::vector<std::span<double>> in_grads;
            in_grads.reserve(in_nodes.size());
            for (auto& n : in_nodes)
                in_grads.push_back(n ? std::span<double>(n->grad)
                                     : std::span<double>());
            backward(std::span<const double>(rn->grad), in_grads);
        });
    }
    return r;
}

// ---- numeric helpers -----------------------------------------------------------

double stable_sigmoid(double x) {
    if (x >= 0.0) {
        const double e = std::exp(-x);
        return 1.0 / (1.0 + e);
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double stable_softplus(double x) {
    if (x > 0.0) return x + std::log1p(std::exp(-x));
    return std::log1p(std::exp(x));
}

bool all_finite(std::span<const double> xs) {
    for (double x : xs)
        if (!std::isfinite(x)) return false;
    return true;
}

} // namespace coxvae
