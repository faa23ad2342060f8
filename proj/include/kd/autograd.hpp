#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "kd/tensor.hpp"

namespace kd {

// Reverse-mode automatic differentiation over Tensor values.
//
// A Var is a shared handle to a node in an implicit tape: each op allocates a
// fresh node holding the forward value plus a closure that scatters the
// node's gradient into its parents. backward() walks the tape once in
// reverse topological order. Graphs are acyclic (children reference
// parents only), so plain shared_ptr ownership reclaims them.
class Var {
 public:
  struct Node {
    Tensor value;
    Tensor grad;  // allocated on first accumulation
    bool requires_grad = false;
    bool has_grad = false;
    std::vector<Var> parents;
    std::function<void(Node&)> backward_fn;
  };

  Var() = default;

  static Var leaf(Tensor value, bool requires_grad = false);

  // New op node; `backward_fn` reads node.grad and accumulates into parents.
  static Var op(Tensor value, std::vector<Var> parents,
                std::function<void(Node&)> backward_fn);

  bool defined() const { return static_cast<bool>(node_); }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const std::vector<std::int64_t>& shape() const { return node_->value.shape(); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  // Toggling to false on a leaf stops future ops from recording it on the
  // tape (used to freeze the teacher). Affects ops built afterwards only.
  void set_requires_grad(bool v) { node_->requires_grad = v; }

  // Gradient accumulated by the last backward(); zeros if none reached it.
  Tensor grad() const;
  void clear_grad();

  // Same value, detached from the tape. Gradients never flow past it.
  Var detach() const;

  void accumulate_grad(const Tensor& g) const;
  Node* raw() const { return node_.get(); }

 private:
  std::shared_ptr<Node> node_;
};

// Backpropagates from a scalar root (numel 1). Accumulates into the `grad`
// of every reachable node with requires_grad.
void backward(const Var& root);

}  // namespace kd
