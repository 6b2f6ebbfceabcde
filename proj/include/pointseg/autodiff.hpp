#pragma once
// Tape-based reverse-mode autodiff over Tensor.
//
// A Tape owns the nodes of one forward pass; creation order is the
// topological order, so backward() is a single reverse sweep. Nodes
// created from inputs with requires_grad=false carry no backward
// closure, which makes pure inference allocation-light.
//
// Parameter leaves alias an external gradient buffer, so gradients
// accumulate across tapes (gradient accumulation falls out for free).

#include <functional>
#include <memory>
#include <vector>

#include "pointseg/tensor.hpp"

namespace pointseg::ag {

struct Node {
  Tensor value;
  Tensor grad;  // undefined until touched by backward
  bool requires_grad = false;
  std::function<void()> backward;
};

class Tape;

struct Var {
  Tape* tape = nullptr;
  Node* node = nullptr;

  bool defined() const { return node != nullptr; }
  const Tensor& val() const { return node->value; }
  const Shape& shape() const { return node->value.shape(); }
  std::int64_t dim(int i) const { return node->value.dim(i); }
  bool requires_grad() const { return node->requires_grad; }
};

class Tape {
 public:
  Var leaf(Tensor value, bool requires_grad = false);
  // Leaf whose grad buffer aliases `grad_sink` (same storage).
  Var param(const Tensor& value, Tensor& grad_sink);
  // Runs the reverse sweep from a scalar root ([1]-shaped).
  void backward(const Var& root);

  Node* make(Tensor value, bool requires_grad);
  std::size_t node_count() const { return nodes_.size(); }

 private:
  std::vector<std::unique_ptr<Node>> nodes_;
};

void ensure_grad(Node* n);
void accumulate(Node* parent, const Tensor& g);

// --- elementwise / scalar ---
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var neg(Var a);
Var scale(Var a, double s);
Var add_scalar(Var a, double c);
Var relu(Var a);
Var sigmoid(Var a);
Var mul_const(Var a, const Tensor& c);   // elementwise with a constant
Var sdiv(Var a, Var b);                  // [1] / [1]

// --- shape ---
Var reshape(Var a, Shape s);
Var permute(Var a, const std::vector<int>& dims);
Var concat(const std::vector<Var>& xs, int axis);
Var slice(Var a, int axis, std::int64_t start, std::int64_t len);

// --- linear algebra ---
Var matmul(Var a, Var b);                // [m,k]x[k,n] or [B,m,k]x[B,k,n]
Var add_bias(Var x, Var b);              // x [...,n] + b [n]

// --- nonlinear blocks ---
Var softmax_last(Var a);
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);

// --- reductions / losses ---
Var sum_all(Var a);
Var mean_all(Var a);
// Binary cross-entropy with logits, averaged over elements where
// mask == 1 (mask may be undefined => all elements).
Var bce_logits_mean(Var logits, const Tensor& targets, const Tensor& mask);
// Mean |pred - target| over elements where mask == 1.
Var l1_masked_mean(Var pred, const Tensor& target, const Tensor& mask);

// --- spatial ---
Var conv2d(Var x, Var w, Var b, std::int64_t stride, std::int64_t pad);
Var tconv2x(Var x, Var w, Var b);
// field [C,H,W], points [M,2] (x,y pixel coords) -> [M,C]; border clamp;
// differentiable in both arguments.
Var bilinear(Var field, Var points);

Var detach(Var a);

}  // namespace pointseg::ag
