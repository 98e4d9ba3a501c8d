#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "latent_depth/errors.hpp"

namespace latent_depth {

using Real = double;
using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

namespace detail {

// One vertex of the recorded computation graph. Leaves hold user data and
// parameters; interior nodes additionally hold their inputs and a closure that
// maps the node's gradient onto the inputs' gradients.
struct Node {
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;  // empty until first touched
  bool requires_grad = false;
  bool consumed = false;  // set on the root after backward()
  std::string_view op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }
  std::vector<Real>& ensure_grad();
};

}  // namespace detail

// Dense row-major real array. Copies share storage (handle semantics, like a
// framework tensor); use detach() for an independent copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, Real fill = 0.0);
  Tensor(Shape shape, std::vector<Real> values);

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor full(Shape shape, Real value) { return Tensor(std::move(shape), value); }
  static Tensor scalar(Real value) { return Tensor(Shape{1}, value); }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return node_ ? node_->data.size() : 0; }

  std::span<const Real> data() const;
  std::span<Real> mutable_data();
  Real item() const;
  Real at(std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  Tensor& set_requires_grad(bool on);

  bool has_grad() const { return node_ && !node_->grad.empty(); }
  // Gradient accumulated by backward(); all zeros if nothing reached this tensor.
  std::vector<Real> grad() const;
  std::span<const Real> grad_view() const;
  void zero_grad();

  // Independent leaf copy of the data; requires_grad is off.
  Tensor detach() const;

  // Throws NonFiniteError naming `what` if any element is NaN or Inf.
  void check_finite(std::string_view what) const;

  // Reverse-mode sweep from this scalar. Leaves accumulate into their grad,
  // so call zero_grad() on parameters between steps. A given output may only
  // be differentiated once.
  void backward();

  std::string_view op_name() const { return node_ ? node_->op : "undefined"; }

  // Low-level access used by operator implementations.
  const std::shared_ptr<detail::Node>& node() const { return node_; }
  static Tensor from_node(std::shared_ptr<detail::Node> node);

 private:
  std::shared_ptr<detail::Node> node_;
};

// While alive, operators on this thread record no graph: results are leaves
// without gradient, whatever their inputs.
class NoGradScope {
 public:
  NoGradScope();
  ~NoGradScope();
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  bool previous_;
};
bool grad_recording_enabled();

// Fault injection for the verification harness: while set, the upstream
// gradient entering every node produced by `op` is scaled by 1.5 during
// backward(). Empty string disables it.
void set_backward_fault(std::string op);
std::string backward_fault();

}  // namespace latent_depth
