#include "latent_depth/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <mutex>
#include <sstream>
#include <unordered_set>

namespace latent_depth {

namespace {

std::mutex g_fault_mutex;
std::string g_fault_op;

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  return os.str();
}

std::vector<Real>& detail::Node::ensure_grad() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

namespace {

void validate_shape(const Shape& shape) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one dimension");
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == 0) {
      throw ShapeError("tensor dimension " + std::to_string(i) + " is zero in shape " +
                       shape_string(shape));
    }
  }
}

}  // namespace

Tensor::Tensor(Shape shape, Real fill) {
  validate_shape(shape);
  node_ = std::make_shared<detail::Node>();
  node_->data.assign(shape_numel(shape), fill);
  node_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<Real> values) {
  validate_shape(shape);
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("shape " + shape_string(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  node_ = std::make_shared<detail::Node>();
  node_->data = std::move(values);
  node_->shape = std::move(shape);
}

Tensor Tensor::from_node(std::shared_ptr<detail::Node> node) {
  Tensor t;
  t.node_ = std::move(node);
  return t;
}

const Shape& Tensor::shape() const {
  static const Shape kEmpty;
  return node_ ? node_->shape : kEmpty;
}

std::size_t Tensor::dim(std::size_t axis) const {
  const Shape& s = shape();
  if (axis >= s.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " +
                     shape_string(s));
  }
  return s[axis];
}

std::span<const Real> Tensor::data() const {
  if (!node_) return {};
  return node_->data;
}

std::span<Real> Tensor::mutable_data() {
  if (!node_) throw GraphError("mutable_data() on an undefined tensor");
  return node_->data;
}

Real Tensor::item() const {
  if (numel() != 1) {
    throw ShapeError("item() needs a single-element tensor, shape is " + shape_string(shape()));
  }
  return node_->data[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
  if (!node_) throw GraphError("set_requires_grad on an undefined tensor");
  if (!node_->is_leaf()) throw GraphError("requires_grad can only be set on leaf tensors");
  node_->requires_grad = on;
  return *this;
}

std::vector<Real> Tensor::grad() const {
  if (!node_) return {};
  if (node_->grad.empty()) return std::vector<Real>(node_->data.size(), 0.0);
  return node_->grad;
}

std::span<const Real> Tensor::grad_view() const {
  if (!node_) return {};
  return node_->grad;
}

void Tensor::zero_grad() {
  if (node_) node_->grad.clear();
}

Tensor Tensor::detach() const {
  if (!node_) return {};
  return Tensor(node_->shape, node_->data);
}

void Tensor::check_finite(std::string_view what) const {
  for (std::size_t i = 0; i < numel(); ++i) {
    if (!std::isfinite(node_->data[i])) {
      throw NonFiniteError(std::string(what) + ": non-finite value at flat index " +
                           std::to_string(i));
    }
  }
}

void Tensor::backward() {
  if (!node_) throw GraphError("backward() on an undefined tensor");
  if (node_->data.size() != 1) {
    throw GraphError("backward() needs a scalar output, shape is " + shape_string(node_->shape));
  }
  if (node_->consumed) throw GraphError("backward() already ran on this output");
  if (!node_->requires_grad) throw GraphError("backward() on a tensor that does not require grad");

  // Iterative post-order DFS gives a deterministic topological order.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> done;
  std::unordered_set<detail::Node*> on_stack;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  on_stack.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->inputs.size()) {
      detail::Node* child = n->inputs[next++].get();
      if (!child->requires_grad || done.count(child)) continue;
      if (on_stack.count(child)) throw GraphError("cycle in computation graph");
      stack.emplace_back(child, 0);
      on_stack.insert(child);
      continue;
    }
    on_stack.erase(n);
    done.insert(n);
    order.push_back(n);
    stack.pop_back();
  }

  // Interior gradients are per-sweep; only leaves accumulate across sweeps.
  for (detail::Node* n : order) {
    if (!n->is_leaf()) n->grad.assign(n->data.size(), 0.0);
  }
  node_->ensure_grad()[0] += 1.0;

  const std::string fault = backward_fault();
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->is_leaf()) continue;
    if (!fault.empty() && n->op == fault) {
      for (Real& g : n->grad) g *= 1.5;
    }
    n->backward_fn(*n);
  }
  node_->consumed = true;
}

namespace {
thread_local bool g_recording = true;
}  // namespace

NoGradScope::NoGradScope() : previous_(g_recording) { g_recording = false; }
NoGradScope::~NoGradScope() { g_recording = previous_; }
bool grad_recording_enabled() { return g_recording; }

void set_backward_fault(std::string op) {
  std::lock_guard lock(g_fault_mutex);
  g_fault_op = std::move(op);
}

std::string backward_fault() {
  std::lock_guard lock(g_fault_mutex);
  return g_fault_op;
}

}  // namespace latent_depth
