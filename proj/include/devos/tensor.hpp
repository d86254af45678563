#pragma once

// Dense row-major tensors with a reverse-mode differentiation tape.
//
// A Tensor is a cheap handle onto a shared Node. Every primitive records its
// parents and a backward closure on the output node, so the computation graph
// *is* the tape; Tape linearizes it in topological order when a backward pass
// is requested. Nothing is global except the per-thread grad-mode flag, so
// threads that own disjoint graphs never interact.

#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "devos/errors.hpp"

namespace devos {

using Shape = std::vector<int>;

inline long numel(const Shape& shape) {
  long n = 1;
  for (int d : shape) n *= d;
  return n;
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}
}  // namespace detail

inline bool grad_enabled() { return detail::grad_mode_flag(); }

// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <typename T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this node's grad and accumulates into parents that require grad.
  std::function<void(Node&)> backward;

  bool is_leaf() const { return parents.empty(); }
  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

template <typename T>
class Tensor {
 public:
  using Scalar = T;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> data, bool requires_grad = false)
      : node_(std::make_shared<Node<T>>()) {
    for (int d : shape) {
      if (d <= 0) throw DimensionError("tensor dimensions must be positive, got " + shape_str(shape));
    }
    if (numel(shape) != static_cast<long>(data.size())) {
      throw DimensionError("shape " + shape_str(shape) + " does not match " +
                           std::to_string(data.size()) + " values");
    }
    node_->shape = std::move(shape);
    node_->data = std::move(data);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(const Shape& shape, bool requires_grad = false) {
    return full(shape, T(0), requires_grad);
  }
  static Tensor full(const Shape& shape, T value, bool requires_grad = false) {
    return Tensor(shape, std::vector<T>(static_cast<std::size_t>(numel(shape)), value), requires_grad);
  }
  static Tensor scalar(T value, bool requires_grad = false) { return Tensor({1}, {value}, requires_grad); }

  explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  bool defined() const { return static_cast<bool>(node_); }
  const std::shared_ptr<Node<T>>& node() const { return node_; }

  const Shape& shape() const { return node_->shape; }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  int dim(int axis) const {
    const int n = ndim();
    if (axis < 0) axis += n;
    if (axis < 0 || axis >= n) throw DimensionError("axis out of range for " + shape_str(shape()));
    return node_->shape[static_cast<std::size_t>(axis)];
  }
  long size() const { return static_cast<long>(node_->data.size()); }

  std::span<const T> data() const { return node_->data; }
  // Direct mutation is reserved for leaves (parameters, optimizer updates).
  std::span<T> mutable_data() {
    if (!node_->is_leaf()) throw UsageError("in-place write to a non-leaf tensor");
    return node_->data;
  }
  T operator[](long i) const { return node_->data[static_cast<std::size_t>(i)]; }
  T item() const {
    if (size() != 1) throw UsageError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) {
    if (!node_->is_leaf()) throw UsageError("requires_grad can only be set on leaves");
    node_->requires_grad = on;
  }
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const T> grad() const { return node_->grad; }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.clear(); }

  // Copy of the values with no graph history.
  Tensor detach() const { return Tensor(shape(), node_->data, false); }

  template <typename U>
  Tensor<U> cast() const {
    std::vector<U> out(node_->data.begin(), node_->data.end());
    return Tensor<U>(shape(), std::move(out), requires_grad());
  }

 private:
  std::shared_ptr<Node<T>> node_;
};

// Topologically ordered view of the graph reachable from a root.
template <typename T>
class Tape {
 public:
  explicit Tape(const Tensor<T>& root) {
    std::unordered_set<const Node<T>*> seen;
    // Iterative post-order DFS: parents always precede children.
    std::vector<std::pair<Node<T>*, std::size_t>> stack;
    stack.emplace_back(root.node().get(), 0);
    seen.insert(root.node().get());
    while (!stack.empty()) {
      auto& [node, next] = stack.back();
      if (next < node->parents.size()) {
        Node<T>* parent = node->parents[next++].get();
        if (parent && parent->requires_grad && seen.insert(parent).second) stack.emplace_back(parent, 0);
      } else {
        order_.push_back(node);
        stack.pop_back();
      }
    }
  }

  const std::vector<Node<T>*>& nodes() const { return order_; }

  // Seeds d(root)/d(root) = 1 and runs every recorded backward closure once.
  void run() {
    Node<T>* root = order_.back();
    for (Node<T>* n : order_) {
      if (!n->is_leaf()) n->grad.clear();
    }
    root->ensure_grad()[0] += T(1);
    for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
      Node<T>* n = *it;
      if (n->backward && !n->grad.empty()) n->backward(*n);
    }
  }

 private:
  std::vector<Node<T>*> order_;
};

template <typename T>
void backward(const Tensor<T>& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw UsageError("backward() needs a scalar loss, got " +
                     (loss.defined() ? shape_str(loss.shape()) : std::string("undefined")));
  }
  if (!loss.requires_grad()) throw UsageError("backward() on a loss that does not depend on tracked tensors");
  Tape<T>(loss).run();
}

namespace detail {

template <typename T>
void check_finite(const std::vector<T>& values, const char* op) {
  for (T v : values) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
  }
}

// Wraps freshly computed values into an output tensor and, when any parent is
// tracked and grad mode is on, attaches the backward closure.
template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> values, const char* op,
                      std::initializer_list<Tensor<T>> parents, std::function<void(Node<T>&)> bw) {
  check_finite(values, op);
  Tensor<T> out(std::move(shape), std::move(values));
  bool tracked = false;
  if (grad_enabled()) {
    for (const auto& p : parents) tracked = tracked || (p.defined() && p.requires_grad());
  }
  if (tracked) {
    auto& node = *out.node();
    node.requires_grad = true;
    node.op = op;
    for (const auto& p : parents) node.parents.push_back(p.defined() ? p.node() : nullptr);
    node.backward = std::move(bw);
  }
  return out;
}

template <typename T>
Tensor<T> make_result(Shape shape, std::vector<T> values, const char* op,
                      const std::vector<Tensor<T>>& parents, std::function<void(Node<T>&)> bw) {
  check_finite(values, op);
  Tensor<T> out(std::move(shape), std::move(values));
  bool tracked = false;
  if (grad_enabled()) {
    for (const auto& p : parents) tracked = tracked || p.requires_grad();
  }
  if (tracked) {
    auto& node = *out.node();
    node.requires_grad = true;
    node.op = op;
    for (const auto& p : parents) node.parents.push_back(p.node());
    node.backward = std::move(bw);
  }
  return out;
}

// Parent slot i wants a gradient.
template <typename T>
inline bool wants_grad(const Node<T>& out, std::size_t i) {
  return i < out.parents.size() && out.parents[i] && out.parents[i]->requires_grad;
}

}  // namespace detail
}  // namespace devos
