#include "hct/autograd.hpp"

#include <unordered_set>
#include <utility>

#include "hct/errors.hpp"

namespace hct::ad {

Tensor& Node::grad_buffer() {
  if (!has_grad()) grad = Tensor(value.shape(), 0.0);
  return grad;
}

Var Var::constant(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  return Var(std::move(node));
}

Var Var::parameter(Tensor value) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = true;
  return Var(std::move(node));
}

Var Var::from_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  for (auto& p : parents) {
    if (p.requires_grad()) node->requires_grad = true;
  }
  if (node->requires_grad) {
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node_);
    node->backward_fn = std::move(backward_fn);
  }
  return Var(std::move(node));
}

Tensor Var::grad() const {
  if (node_->has_grad()) return node_->grad;
  return Tensor(node_->value.shape(), 0.0);
}

void Var::zero_grad() {
  if (node_->has_grad()) node_->grad.fill(0.0);
}

void backward(const Var& root) {
  if (!root) throw ArgumentError("backward on an empty variable");
  if (root.value().size() != 1) {
    throw DimensionError("backward requires a scalar root, got shape " + to_string(root.shape()));
  }
  Node* start = root.node();
  if (!start->requires_grad) return;

  // Iterative post-order DFS; `order` ends up topologically sorted (parents first).
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack{{start, 0}};
  visited.insert(start);
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  start->grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* node = *it;
    if (node->backward_fn && node->has_grad()) node->backward_fn(*node);
  }
}

}  // namespace hct::ad
