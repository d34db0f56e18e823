#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "coxvae/errors.hpp"

namespace coxvae {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

namespace detail {
struct Node;
struct GraphState;
struct OpAccess;
} // namespace detail

class Graph;

/// Dense row-major tensor of 64-bit floats. A tensor is either a plain
/// constant (dataset rows, epsilon draws) or tracked on a Graph, in which
/// case every operation consuming it records a backward rule on that
/// graph's tape. Copies are shallow: they alias the same value buffer.
class Tensor {
  public:
    Tensor() = default;
    Tensor(Shape shape, std::vector<double> values);

    static Tensor zeros(Shape shape);
    static Tensor full(Shape shape, double value);
    static Tensor scalar(double value);

    bool defined() const { return data_ != nullptr; }
    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t numel() const;
    std::size_t dim(std::size_t axis) const;

    std::span<const double> values() const;
    std::span<double> values_mut();
    double item() const;
    double at(std::size_t i) const;
    double at(std::size_t row, std::size_t col) const;

    /// True when the tensor participates in a graph.
    bool tracked() const { return node_ != nullptr; }
    /// Accumulated gradient; valid after Graph::backward. Throws
    /// ContractError on untracked tensors.
    std::span<const double> grad() const;
    std::span<double> grad_mut();
    /// Drops graph membership; the value buffer is untouched.
    void detach() { node_.reset(); }

    /// Deep copy of the value buffer, untracked.
    Tensor clone_values() const;

  private:
    Shape shape_;
    std::shared_ptr<std::vector<double>> data_;
    std::shared_ptr<detail::Node> node_;

    friend class Graph;
    friend struct detail::OpAccess;
};

/// Reverse-mode tape. Operations are recorded in execution order, which is
/// by construction a valid topological order, so the backward pass is a
/// single reverse sweep. One graph must only be used from one thread.
class Graph {
  public:
    Graph();
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    /// Registers `t` as a differentiable leaf of this graph, in place.
    /// Re-watching replaces any previous registration.
    Tensor& watch(Tensor& t);

    /// Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse. `loss`
    /// must be a scalar tracked on this graph. Repeated calls without
    /// zero_grad accumulate gradients.
    void backward(const Tensor& loss);

    void zero_grad();

    std::size_t op_count() const;

  private:
    std::shared_ptr<detail::GraphState> state_;
    friend struct detail::OpAccess;
};

// ---- recorded operations ----------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& m);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double c);
Tensor scale(const Tensor& a, double c);
Tensor negate(const Tensor& a);

Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope = 0.01);
Tensor clamp(const Tensor& a, double lo, double hi);

/// Adds a length-N row vector to every row of a [B x N] matrix.
Tensor add_rowvec(const Tensor& m, const Tensor& v);

Tensor sum(const Tensor& a);
Tensor sum(const Tensor& a, std::size_t axis);
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, std::size_t axis);

/// log(sum(exp(x))) of a nonempty vector, computed with max subtraction:
/// finite for any finite input. Backward is softmax(x).
Tensor logsumexp(const Tensor& x);

Tensor reshape(const Tensor& a, Shape shape);

/// Extension point for operations with hand-derived gradients. `backward`
/// receives the output gradient and one writable gradient span per input
/// (empty span for untracked inputs) and must accumulate with +=.
Tensor custom_op(
    const std::vector<Tensor>& inputs, Shape out_shape,
    std::vector<double> out_values,
    std::function<void(std::span<const double> out_grad,
                       const std::vector<std::span<double>>& in_grads)>
        backward);

// ---- numeric helpers (no graph involvement) ----------------------------

double stable_sigmoid(double x);
double stable_softplus(double x);
bool all_finite(std::span<const double> xs);

} // namespace coxvae
