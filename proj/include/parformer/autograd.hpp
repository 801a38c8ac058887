#pragma once

// Tape-free reverse-mode autodiff: every differentiable op returns a Var whose
// node remembers its inputs and a closure that pushes the output gradient back
// into them. backward() walks the recorded DAG once in reverse topological
// order and then releases it.

#include <atomic>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "parformer/tensor.hpp"

namespace parformer {

namespace detail {
inline thread_local bool grad_enabled = true;
inline std::atomic<std::uint64_t> next_node_id{1};
}  // namespace detail

/// Disables trace recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_enabled; }

template <typename T>
struct Node {
  using BackwardFn = std::function<void(Node&)>;

  Tensor<T> value;
  Tensor<T> grad;  // empty until something flows into it
  bool requires_grad = false;
  bool consumed = false;
  const char* op = "leaf";
  std::uint64_t id = detail::next_node_id.fetch_add(1, std::memory_order_relaxed);
  std::vector<std::shared_ptr<Node>> inputs;
  BackwardFn backward;

  bool is_leaf() const { return inputs.empty() && !backward; }

  void accumulate(const Tensor<T>& g) {
    if (!requires_grad) return;
    if (grad.size() == 0 && value.size() != 0) {
      grad = g;
    } else {
      grad += g;
    }
  }

  void accumulate(Tensor<T>&& g) {
    if (!requires_grad) return;
    if (grad.size() == 0 && value.size() != 0) {
      grad = std::move(g);
    } else {
      grad += g;
    }
  }
};

/// Handle to a value in the (possibly recorded) computation.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  static Var leaf(Tensor<T> value, bool requires_grad = false) {
    auto n = std::make_shared<Node<T>>();
    n->value = std::move(value);
    n->requires_grad = requires_grad;
    return Var(std::move(n));
  }

  bool defined() const { return node_ != nullptr; }
  const Tensor<T>& value() const { return node_->value; }
  Tensor<T>& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool r) { node_->requires_grad = r; }
  bool has_grad() const { return node_->grad.size() != 0; }
  const Tensor<T>& grad() const { return node_->grad; }
  Tensor<T>& mutable_grad() { return node_->grad; }
  void zero_grad() { node_->grad = Tensor<T>(); }
  std::uint64_t id() const { return node_->id; }
  const char* op() const { return node_->op; }
  Node<T>& node() const { return *node_; }
  const std::shared_ptr<Node<T>>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

/// Builds the output Var of an op. The trace is recorded only when grad mode
/// is on and at least one input needs a gradient.
template <typename T>
Var<T> make_result(const char* op, Tensor<T> value, std::vector<Var<T>> inputs,
                   typename Node<T>::BackwardFn backward) {
  require_finite(value, op);
  auto n = std::make_shared<Node<T>>();
  n->value = std::move(value);
  n->op = op;
  if (grad_enabled()) {
    bool any = false;
    for (const auto& in : inputs) any = any || in.requires_grad();
    if (any) {
      n->requires_grad = true;
      n->inputs.reserve(inputs.size());
      for (auto& in : inputs) n->inputs.push_back(in.node_ptr());
      n->backward = std::move(backward);
    }
  }
  return Var<T>(std::move(n));
}

/// Accumulates d(loss)/d(theta) into theta.grad for every leaf that requires
/// a gradient, then releases the trace.
template <typename T>
void backward(const Var<T>& loss) {
  if (!loss.defined()) throw Error("state", "backward on an undefined value");
  if (loss.value().size() != 1) {
    throw Error("shape", "backward needs a scalar loss, got " + to_string(loss.shape()));
  }
  const auto& root_ptr = loss.node_ptr();
  Node<T>& root = *root_ptr;
  if (root.consumed) throw Error("state", "backward called twice on a consumed trace");
  if (!root.requires_grad) throw Error("state", "loss does not depend on any tensor requiring grad");

  // Iterative post-order DFS gives a topological order. `order` holds owning
  // pointers because releasing a node's inputs may drop the last reference.
  std::vector<std::shared_ptr<Node<T>>> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<std::shared_ptr<Node<T>>, std::size_t>> stack{{root_ptr, 0}};
  seen.insert(&root);
  while (!stack.empty()) {
    auto& top = stack.back();
    if (top.second < top.first->inputs.size()) {
      auto child = top.first->inputs[top.second++];
      if (child->requires_grad && !seen.count(child.get())) {
        seen.insert(child.get());
        stack.emplace_back(std::move(child), 0);
      }
    } else {
      order.push_back(std::move(top.first));
      stack.pop_back();
    }
  }

  root.grad = Tensor<T>(root.value.shape(), T(1));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = it->get();
    if (node->backward && node->grad.size() != 0) {
      require_finite(node->grad, node->op);
      node->backward(*node);
    }
    if (!node->is_leaf()) {
      node->backward = nullptr;
      node->inputs.clear();
      node->grad = Tensor<T>();
      node->consumed = true;
    }
  }
  root.consumed = true;
}

}  // namespace parformer
