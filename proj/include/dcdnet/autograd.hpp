#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "dcdnet/tensor.hpp"

// Reverse-mode automatic differentiation over Tensors.
//
// A Var is a handle on a graph node. Ops build new nodes only when gradient
// recording is enabled and at least one input requires a gradient, so frozen
// subgraphs and evaluation passes carry no tape.
namespace dcdnet::ag {

struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  std::function<void(Node&)> backward_fn;

  Tensor& grad_buffer() {
    if (grad.size() != value.size()) grad = Tensor::zeros_like(value);
    return grad;
  }
  bool has_grad() const { return !grad.empty(); }
};

class Var {
 public:
  Var() = default;
  explicit Var(Tensor value, bool requires_grad = false);
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  int dim(int i) const { return node_->value.dim(i); }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const { return static_cast<bool>(node_); }

  // Gradient accumulated by backward(); zeros if none reached this node.
  Tensor grad() const;
  void zero_grad();

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Disables tape construction for its lifetime (thread-local).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};
bool grad_enabled();

Var constant(Tensor value);
Var detach(const Var& x);

// Runs reverse accumulation from `root`. A scalar root gets an implicit seed
// of 1; otherwise `seed` must match its shape.
void backward(const Var& root);
void backward(const Var& root, const Tensor& seed);

// Elementwise.
Var relu(const Var& x);
Var sigmoid(const Var& x);
Var tanh(const Var& x);
Var exp(const Var& x);
Var log(const Var& x);
Var sqrt(const Var& x);
Var square(const Var& x);
Var clamp(const Var& x, double lo, double hi);
Var mul_scalar(const Var& x, double s);
Var add_scalar(const Var& x, double s);

// Binary ops broadcast over equal-rank shapes whose dims agree or are 1.
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, const Var& b) { return mul(a, b); }
inline Var operator/(const Var& a, const Var& b) { return div(a, b); }
inline Var operator*(const Var& a, double s) { return mul_scalar(a, s); }
inline Var operator*(double s, const Var& a) { return mul_scalar(a, s); }

// Reductions.
Var sum(const Var& x);
Var mean(const Var& x);
Var sum_squares(const Var& x);

// Structure.
Var reshape(const Var& x, Shape shape);
Var concat0(const std::vector<Var>& parts);
Var slice0(const Var& x, int begin, int end);
Var transpose2d(const Var& x);
Var matmul(const Var& a, const Var& b);

// Feature-map ops on [C,H,W].
Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad);
Var instance_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var resize_bilinear(const Var& x, int out_h, int out_w);
Var channel_mean(const Var& x);  // -> [1,H,W]
Var channel_max(const Var& x);   // -> [1,H,W]
Var spatial_mean(const Var& x);  // -> [C,1,1]
Var spatial_max(const Var& x);   // -> [C,1,1]
Var softmax0(const Var& x);      // softmax along axis 0 at every position
Var normalize0(const Var& x, double eps = 1e-12);  // unit L2 norm along axis 0
Var linear(const Var& x, const Var& weight, const Var& bias);  // [N] -> [O]

// Mean of feature columns weighted by a constant [H,W] mask -> [C].
Var masked_mean_columns(const Var& x, const Tensor& weights);
// Dot product of every column with a [C] vector -> [1,H,W].
Var channel_dot(const Var& x, const Var& v);
// Rows of the [HW, C] view of x at the given flat pixel indices -> [n,C].
Var gather_columns(const Var& x, std::span<const int> pixels);
// Rows of a [n,d] matrix -> [m,d].
Var gather_rows(const Var& x, std::span<const int> rows);

// Identity forward; backward multiplies the incoming gradient by -lambda.
Var gradient_reversal(const Var& x, double lambda);

// Mean binary cross-entropy of probabilities against {0,1} targets; the
// probabilities are clamped to [eps, 1-eps].
Var binary_cross_entropy(const Var& prob, const Tensor& target, double eps = 1e-7);

// Per-anchor InfoNCE term -log(e^{a.p/t} / (e^{a.p/t} + sum_{j in N(i)} e^{a.b_j/t})).
// `negatives` is a constant [M,d] bank; neg_mask is row-major n x M (1 = use).
Var info_nce(const Var& anchors, const Var& positives, const Tensor& negatives,
             std::span<const std::uint8_t> neg_mask, double tau);

}  // namespace dcdnet::ag
