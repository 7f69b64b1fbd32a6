#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "pcan/tensor.hpp"

namespace pcan::nn {

// Reverse-mode autograd over Tensor. The graph is built forward (children
// point to parents), so creation order is a valid topological order and
// backward() just replays it in reverse. Leaves created with requires_grad
// persist across steps and accumulate gradients until zero_grad().
struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  bool is_leaf = false;
  uint64_t seq = 0;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backprop;

  Tensor& grad_buf() {
    if (grad.empty()) grad = Tensor(value.shape());
    return grad;
  }
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  bool defined() const { return node_ != nullptr; }
  const Tensor& value() const { return node_->value; }
  Tensor& grad() { return node_->grad_buf(); }
  const Tensor& grad() const { return node_->grad; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  std::shared_ptr<Node> node() const { return node_; }

  double item() const { return node_->value[0]; }

  void zero_grad() {
    if (node_) node_->grad = Tensor();
  }

  // Runs backpropagation from this scalar.
  void backward() const;

 private:
  std::shared_ptr<Node> node_;
};

Var leaf(Tensor v, bool requires_grad);
Var constant(Tensor v);
Var constant_scalar(double v);

Var make_op(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backprop);

// ---- elementwise ----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var mine(const Var& a, const Var& b);  // elementwise min, ties route grad to a
Var maxe(const Var& a, const Var& b);  // elementwise max, ties route grad to a
Var scale(const Var& a, double s);
Var add_const(const Var& a, double c);
Var relu(const Var& a);
Var sigmoid(const Var& a);
Var vexp(const Var& a);
Var vlog(const Var& a);
Var vabs(const Var& a);
Var vsin(const Var& a);
Var vcos(const Var& a);
Var softplus(const Var& a);  // log(1 + exp(x)), overflow-safe
Var vpow(const Var& a, double p);  // requires a >= 0
Var clamp(const Var& a, double lo, double hi);
Var logit(const Var& a, double eps = 1e-6);  // inverse sigmoid of clamp(a, eps, 1-eps)

// ---- broadcast over rows: a is [M,N], row is [1,N] ----
Var add_rows(const Var& a, const Var& row);
Var mul_rows(const Var& a, const Var& row);
Var repeat_row(const Var& row, int n);  // [1,N] -> [n,N]

// ---- matrix ----
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);

// ---- reductions / row ops; inputs [M,N] ----
Var sum(const Var& a);   // -> [1]
Var mean(const Var& a);  // -> [1]
Var softmax_rows(const Var& a);
Var logsumexp_rows(const Var& a);  // -> [M,1]
Var layer_norm_rows(const Var& a, const Var& gamma, const Var& beta, double eps = 1e-5);
Var l2_normalize_rows(const Var& a, double eps = 1e-12);

// ---- structure ----
Var slice_rows(const Var& a, int r0, int r1);
Var slice_cols(const Var& a, int c0, int c1);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
Var reshape(const Var& a, std::vector<int> shape);
Var detach(const Var& a);

// ---- lookup ----
Var embedding(const Var& table, const std::vector<int>& ids);

// ---- image ops, layout [C,H,W] ----
Var conv2d(const Var& x, const Var& w, const Var& b, int stride, int pad);
Var upsample2x_nearest(const Var& x);
Var upsample_bilinear(const Var& x, int factor);
Var chw_to_rows(const Var& x);  // [C,H,W] -> [H*W, C]
Var rows_to_chw(const Var& a, int c, int h, int w);

}  // namespace pcan::nn
