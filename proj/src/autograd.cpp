#include "kd/autograd.hpp"

#include <unordered_set>

namespace kd {

Var Var::leaf(Tensor value, bool requires_grad) {
  Var v;
  v.node_ = std::make_shared<Node>();
  v.node_->value = std::move(value);
  v.node_->requires_grad = requires_grad;
  return v;
}

Var Var::op(Tensor value, std::vector<Var> parents,
            std::function<void(Node&)> backward_fn) {
  Var v;
  v.node_ = std::make_shared<Node>();
  v.node_->value = std::move(value);
  bool needs = false;
  for (const auto& p : parents) needs = needs || p.requires_grad();
  v.node_->requires_grad = needs;
  if (needs) {
    v.node_->parents = std::move(parents);
    v.node_->backward_fn = std::move(backward_fn);
  }
  return v;
}

Tensor Var::grad() const {
  if (node_->has_grad) return node_->grad;
  return Tensor::zeros(node_->value.shape());
}

void Var::clear_grad() {
  node_->has_grad = false;
  node_->grad = Tensor();
}

Var Var::detach() const { return Var::leaf(node_->value, false); }

void Var::accumulate_grad(const Tensor& g) const {
  if (!node_->requires_grad) return;
  if (!node_->has_grad) {
    node_->grad = Tensor::zeros(node_->value.shape());
    node_->has_grad = true;
  }
  node_->grad.add_(g);
}

namespace {

void topo_visit(Var::Node* n, std::unordered_set<Var::Node*>& seen,
                std::vector<Var::Node*>& order) {
  // Iterative DFS; loss graphs for large batches exceed stack-recursion depth.
  struct Frame {
    Var::Node* node;
    std::size_t next_parent;
  };
  std::vector<Frame> stack;
  if (seen.count(n)) return;
  seen.insert(n);
  stack.push_back({n, 0});
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      Var::Node* p = f.node->parents[f.next_parent].raw();
      ++f.next_parent;
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }
}

}  // namespace

void backward(const Var& root) {
  if (!root.defined()) throw InvalidArgument("backward on undefined Var");
  if (root.value().numel() != 1)
    throw InvalidArgument("backward requires a scalar root");
  if (!root.requires_grad()) return;

  std::unordered_set<Var::Node*> seen;
  std::vector<Var::Node*> order;  // parents before children
  topo_visit(root.raw(), seen, order);

  root.accumulate_grad(Tensor::full(root.value().shape(), 1.0));
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Var::Node* n = *it;
    if (n->backward_fn && n->has_grad) n->backward_fn(*n);
  }
}

}  // namespace kd
