// SPDX-License-Identifier: Apache-2.0
#include "seqlidar/autograd.hpp"

#include <unordered_set>

namespace seqlidar {

namespace {
thread_local bool g_grad_enabled = true;
}

bool grad_enabled() noexcept { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

template <typename T>
void backward(const Var<T>& loss) {
  if (!loss.defined()) throw ContractError("backward: undefined loss");
  if (loss.numel() != 1) throw ContractError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  Node<T>* root = loss.node();
  if (root->consumed) throw ContractError("backward: graph already consumed; re-run the forward pass");
  if (!root->requires_grad) throw ContractError("backward: loss does not depend on any parameter");

  // Iterative post-order DFS gives a topological order with inputs first.
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> visited;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{root, 0}};
  visited.insert(root);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node<T>* child = node->inputs[next++].get();
      if (child->backward && visited.insert(child).second) stack.push_back({child, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->grad_buffer().fill(T{1});
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* node = *it;
    if (node->backward && !node->grad.empty()) node->backward(node->grad);
  }
  for (Node<T>* node : order) {
    node->backward = nullptr;
    node->inputs.clear();
    if (node != root) node->grad = Tensor<T>();
    node->consumed = true;
  }
}

template void backward<float>(const Var<float>&);
template void backward<double>(const Var<double>&);

}  // namespace seqlidar
