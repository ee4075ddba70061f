#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "sgi/tensor.hpp"

namespace sgi {

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// Graph node. `backward` reads `grad` and accumulates into the inputs.
struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<NodePtr> inputs;
  std::function<void(Node&)> backward;

  void accumulate(const Tensor& g);
  void accumulate_moved(Tensor&& g);
  Tensor& grad_buffer();
};

/// Handle to a value in the computation graph.
class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  int64_t dim(int i) const { return node_->value.dim(i); }
  double item() const { return node_->value.item(); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  const Tensor& grad() const { return node_->grad; }
  void zero_grad() { node_->grad = Tensor(); }

  /// Reverse-mode sweep from this scalar (seeded with 1).
  void backward() const;
  /// Reverse-mode sweep with an explicit output gradient.
  void backward(const Tensor& seed) const;

  Var detach() const { return Var(node_->value, false); }

  const NodePtr& node() const { return node_; }

 private:
  NodePtr node_;
};

/// Process-wide switch for recording the graph (thread-local).
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Creates a result node; records `fn` only if some input requires grad.
Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> fn);

/// Input `i` of `self` if it participates in differentiation, else null.
inline Node* grad_input(Node& self, size_t i) {
  Node* n = i < self.inputs.size() ? self.inputs[i].get() : nullptr;
  return (n && n->requires_grad) ? n : nullptr;
}

}  // namespace sgi
