#pragma once

// Minimal tape-free reverse-mode differentiation. Every differentiable op
// returns a Var whose node remembers its inputs and a closure that pushes the
// node's gradient back into them. Graphs are freed when the last Var drops.

#include "neuflow/tensor.hpp"

#include <cstdint>
#include <functional>
#include <memory>
#include <unordered_set>
#include <utility>
#include <vector>

namespace neuflow {

namespace detail {
inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

inline std::uint64_t*& branch_trace_slot() {
  thread_local std::uint64_t* slot = nullptr;
  return slot;
}
}  // namespace detail

/// Folds every piecewise branch taken by forward ops (ReLU sign, bilinear cell,
/// L1 sign) into a running hash while alive. Two evaluations with equal hashes
/// lie on the same linear piece of the computation.
class BranchTrace {
 public:
  BranchTrace() : previous_(detail::branch_trace_slot()) { detail::branch_trace_slot() = &hash_; }
  ~BranchTrace() { detail::branch_trace_slot() = previous_; }
  BranchTrace(const BranchTrace&) = delete;
  BranchTrace& operator=(const BranchTrace&) = delete;

  [[nodiscard]] std::uint64_t hash() const { return hash_; }

 private:
  std::uint64_t hash_ = 1469598103934665603ull;
  std::uint64_t* previous_;
};

inline void trace_branch(std::int64_t choice) {
  if (std::uint64_t* h = detail::branch_trace_slot()) {
    *h = (*h ^ static_cast<std::uint64_t>(choice)) * 1099511628211ull;
  }
}

inline bool branch_tracing() { return detail::branch_trace_slot() != nullptr; }

/// Disables graph recording on this thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode_flag(); }

template <class T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward;

  Tensor<T>& grad_buffer() {
    if (grad.empty() && value.size() != 0) grad = Tensor<T>(value.shape());
    return grad;
  }
};

template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  [[nodiscard]] bool defined() const { return static_cast<bool>(node_); }
  [[nodiscard]] const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  [[nodiscard]] const Shape& shape() const { return node_->value.shape(); }
  [[nodiscard]] bool requires_grad() const { return node_ && node_->requires_grad; }

  /// Gradient accumulated by backward(); zeros if nothing flowed here.
  [[nodiscard]] Tensor<T> grad() const {
    if (node_->grad.empty()) return Tensor<T>(node_->value.shape());
    return node_->grad;
  }
  Tensor<T>& grad_buffer() { return node_->grad_buffer(); }
  void zero_grad() { node_->grad = Tensor<T>(); }

  [[nodiscard]] const std::shared_ptr<Node<T>>& node() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Wraps `value` as the result of an op over `inputs`. The backward closure is
/// attached only when recording is enabled and some input needs a gradient.
template <class T>
Var<T> make_result(Tensor<T> value, std::vector<Var<T>> inputs, std::function<void(Node<T>&)> backward) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  if (grad_enabled()) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || in.requires_grad();
    if (needs) {
      node->requires_grad = true;
      node->inputs.reserve(inputs.size());
      for (auto& in : inputs) node->inputs.push_back(in.node());
      node->backward = std::move(backward);
    }
  }
  return Var<T>(std::move(node));
}

/// Gradient sink for input `i` of `node`, or nullptr when that input is constant.
template <class T>
Tensor<T>* input_grad(Node<T>& node, std::size_t i) {
  auto& in = node.inputs[i];
  return in->requires_grad ? &in->grad_buffer() : nullptr;
}

/// Backpropagates from a scalar (single-element) root.
template <class T>
void backward(const Var<T>& root) {
  if (root.value().size() != 1) throw ShapeError("backward: root must hold a single element");
  if (!root.requires_grad()) return;

  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root.node().get(), 0}};
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root.node()->grad_buffer()[0] += T(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(*node);
  }
  // Interior gradients are no longer needed; leaves keep theirs.
  for (Node<T>* node : order) {
    if (node->backward) node->grad = Tensor<T>();
  }
}

}  // namespace neuflow
