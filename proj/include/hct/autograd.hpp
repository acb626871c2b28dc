#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "hct/tensor.hpp"

// Reverse-mode differentiation over whole tensors. Each
// operation records its parents and a closure that pushes the node's
// gradient back into them; backward() replays the graph in reverse
// topological order.
namespace hct::ad {

struct Node {
  Tensor value;
  Tensor grad;  // empty until the first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;

  /// Gradient buffer, allocated as zeros on first use.
  Tensor& grad_buffer();
  bool has_grad() const noexcept { return grad.size() != 0; }
};

class Var {
 public:
  Var() = default;

  /// Leaf that never receives gradients.
  static Var constant(Tensor value);
  /// Leaf that accumulates gradients across backward passes.
  static Var parameter(Tensor value);

  /// Interior node produced by an operation. The node requires a gradient
  /// iff any parent does; backward_fn is dropped otherwise.
  static Var from_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward_fn);

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }

  /// Accumulated gradient; zeros when nothing has flowed in yet.
  Tensor grad() const;
  void zero_grad();

  Node* node() const noexcept { return node_.get(); }
  explicit operator bool() const noexcept { return static_cast<bool>(node_); }

 private:
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  std::shared_ptr<Node> node_;
};

/// Propagates d(root)/d(.) into every reachable node; root must hold one element.
void backward(const Var& root);

}  // namespace hct::ad
