// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "seqlidar/tensor.hpp"

namespace seqlidar {

// One recorded operation. The graph is the set of nodes reachable from a loss
// through `inputs`; it is acyclic because a node only references values that
// existed before it.
template <typename T>
struct Node {
  Tensor<T> value;
  Tensor<T> grad;
  bool requires_grad = false;
  bool consumed = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> inputs;
  // Receives this node's gradient and accumulates into the inputs.
  std::function<void(const Tensor<T>&)> backward;

  Tensor<T>& grad_buffer() {
    if (grad.empty()) grad = Tensor<T>(value.shape());
    return grad;
  }
};

/// Handle to a node. Copies share the node.
template <typename T>
class Var {
 public:
  Var() = default;
  explicit Var(Tensor<T> value, bool requires_grad = false) : node_(std::make_shared<Node<T>>()) {
    node_->value = std::move(value);
    node_->requires_grad = requires_grad;
  }
  explicit Var(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Tensor<T>& value() const { return node_->value; }
  // Explicit in-place updates (optimizer steps, test overrides).
  Tensor<T>& value_mut() { return node_->value; }
  const Tensor<T>& grad() const { return node_->grad; }
  bool has_grad() const { return !node_->grad.empty(); }
  bool requires_grad() const { return node_->requires_grad; }
  const Shape& shape() const { return node_->value.shape(); }
  std::size_t dim(std::size_t i) const { return node_->value.dim(i); }
  std::size_t numel() const { return node_->value.numel(); }
  void zero_grad() { node_->grad = Tensor<T>(); }

  Node<T>* node() const noexcept { return node_.get(); }
  const std::shared_ptr<Node<T>>& node_ptr() const noexcept { return node_; }

 private:
  std::shared_ptr<Node<T>> node_;
};

bool grad_enabled() noexcept;

/// Disables graph recording on the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// Wraps an op result. When recording is on and any input requires a gradient,
// the result joins the graph with `fn` as its backward rule; otherwise it is a
// constant and `fn` is dropped.
template <typename T>
Var<T> make_result(Tensor<T> value, const std::vector<Var<T>>& inputs, const char* op,
                   std::function<void(const Tensor<T>&)> fn) {
  auto node = std::make_shared<Node<T>>();
  node->value = std::move(value);
  node->op = op;
  bool needs = false;
  if (grad_enabled()) {
    for (const auto& in : inputs) needs = needs || (in.defined() && in.requires_grad());
  }
  if (needs) {
    node->requires_grad = true;
    for (const auto& in : inputs) {
      if (in.defined()) node->inputs.push_back(in.node_ptr());
    }
    node->backward = std::move(fn);
  }
  return Var<T>(std::move(node));
}

/// True when the input participates in the graph and should receive a gradient.
template <typename T>
inline bool wants_grad(const Var<T>& v) {
  return v.defined() && v.requires_grad();
}

/// Reverse sweep from a scalar loss. Leaf gradients accumulate; the recorded
/// graph is released afterwards, so a second call on the same loss throws.
template <typename T>
void backward(const Var<T>& loss);

}  // namespace seqlidar
