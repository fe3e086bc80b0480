#include "dcdnet/autograd.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>
#include <string>
#include <unordered_set>

#include "dcdnet/errors.hpp"

namespace dcdnet::ag {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

thread_local bool g_grad_enabled = true;

bool any_requires_grad(const std::vector<Var>& inputs) {
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Var& v) { return v.defined() && v.requires_grad(); });
}

// Wraps an op result. The backward closure is stored only when recording.
Var make_result(Tensor value, const std::vector<Var>& inputs, std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  if (g_grad_enabled && any_requires_grad(inputs)) {
    node->requires_grad = true;
    node->inputs.reserve(inputs.size());
    for (const Var& v : inputs) node->inputs.push_back(v.node());
    node->backward_fn = std::move(backward_fn);
  }
  return Var(std::move(node));
}

Node* input_needing_grad(Node& n, std::size_t i) {
  Node* in = n.inputs[i].get();
  return (in && in->requires_grad) ? in : nullptr;
}

void require_rank(const Var& x, int rank, const char* what) {
  if (x.value().rank() != rank) {
    throw ShapeError(std::string(what) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(x.shape()));
  }
}

template <class Fwd, class Deriv>
Var unary(const Var& x, Fwd fwd, Deriv deriv) {
  Tensor out(x.shape());
  const Tensor& in = x.value();
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = fwd(in[i]);
  return make_result(std::move(out), {x}, [deriv](Node& n) {
    Node* in = input_needing_grad(n, 0);
    if (!in) return;
    Tensor& g = in->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * deriv(in->value[i], n.value[i]);
  });
}

// Broadcasting layout for equal-rank binary ops.
struct Broadcast {
  Shape out;
  std::vector<std::size_t> stride_a, stride_b, stride_out;
  bool same = false;
};

Broadcast plan_broadcast(const Shape& a, const Shape& b, const char* what) {
  if (a.size() != b.size()) {
    throw ShapeError(std::string(what) + ": rank mismatch " + shape_str(a) + " vs " + shape_str(b));
  }
  Broadcast p;
  p.same = (a == b);
  const std::size_t r = a.size();
  p.out.resize(r);
  for (std::size_t i = 0; i < r; ++i) {
    if (a[i] != b[i] && a[i] != 1 && b[i] != 1) {
      throw ShapeError(std::string(what) + ": cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    }
    p.out[i] = std::max(a[i], b[i]);
  }
  auto strides = [r](const Shape& s) {
    std::vector<std::size_t> st(r, 0);
    std::size_t acc = 1;
    for (std::size_t i = r; i-- > 0;) {
      st[i] = (s[i] == 1) ? 0 : acc;
      acc *= static_cast<std::size_t>(s[i]);
    }
    return st;
  };
  p.stride_a = strides(a);
  p.stride_b = strides(b);
  p.stride_out.assign(r, 0);
  std::size_t acc = 1;
  for (std::size_t i = r; i-- > 0;) {
    p.stride_out[i] = acc;
    acc *= static_cast<std::size_t>(p.out[i]);
  }
  return p;
}

// Calls f(out_index, a_index, b_index) for every output element.
template <class F>
void for_each_broadcast(const Broadcast& p, F&& f) {
  const std::size_t n = shape_numel(p.out);
  if (p.same) {
    for (std::size_t i = 0; i < n; ++i) f(i, i, i);
    return;
  }
  const std::size_t r = p.out.size();
  for (std::size_t i = 0; i < n; ++i) {
    std::size_t rem = i, ia = 0, ib = 0;
    for (std::size_t d = 0; d < r; ++d) {
      const std::size_t coord = rem / p.stride_out[d];
      rem -= coord * p.stride_out[d];
      ia += coord * p.stride_a[d];
      ib += coord * p.stride_b[d];
    }
    f(i, ia, ib);
  }
}

enum class BinOp { kAdd, kSub, kMul, kDiv };

Var binary(const Var& a, const Var& b, BinOp op, const char* what) {
  Broadcast plan = plan_broadcast(a.shape(), b.shape(), what);
  Tensor out(plan.out);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) {
    switch (op) {
      case BinOp::kAdd: out[i] = av[ia] + bv[ib]; break;
      case BinOp::kSub: out[i] = av[ia] - bv[ib]; break;
      case BinOp::kMul: out[i] = av[ia] * bv[ib]; break;
      case BinOp::kDiv: out[i] = av[ia] / bv[ib]; break;
    }
  });
  return make_result(std::move(out), {a, b}, [plan, op](Node& n) {
    Node* na = input_needing_grad(n, 0);
    Node* nb = input_needing_grad(n, 1);
    const Tensor& av = n.inputs[0]->value;
    const Tensor& bv = n.inputs[1]->value;
    Tensor* ga = na ? &na->grad_buffer() : nullptr;
    Tensor* gb = nb ? &nb->grad_buffer() : nullptr;
    for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) {
      const double g = n.grad[i];
      switch (op) {
        case BinOp::kAdd:
          if (ga) (*ga)[ia] += g;
          if (gb) (*gb)[ib] += g;
          break;
        case BinOp::kSub:
          if (ga) (*ga)[ia] += g;
          if (gb) (*gb)[ib] -= g;
          break;
        case BinOp::kMul:
          if (ga) (*ga)[ia] += g * bv[ib];
          if (gb) (*gb)[ib] += g * av[ia];
          break;
        case BinOp::kDiv:
          if (ga) (*ga)[ia] += g / bv[ib];
          if (gb) (*gb)[ib] -= g * av[ia] / (bv[ib] * bv[ib]);
          break;
      }
    });
  });
}

// PyTorch-style bilinear sampling table for one axis (align_corners=false).
struct AxisTable {
  std::vector<int> i0, i1;
  std::vector<double> w1;
};

AxisTable axis_table(int in, int out) {
  AxisTable t;
  t.i0.resize(out);
  t.i1.resize(out);
  t.w1.resize(out);
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    if (src < 0) src = 0;
    int lo = static_cast<int>(std::floor(src));
    if (lo > in - 1) lo = in - 1;
    t.i0[o] = lo;
    t.i1[o] = std::min(lo + 1, in - 1);
    t.w1[o] = src - lo;
  }
  return t;
}

}  // namespace

Var::Var(Tensor value, bool requires_grad) : node_(std::make_shared<Node>()) {
  node_->value = std::move(value);
  node_->requires_grad = requires_grad;
}

Tensor Var::grad() const {
  if (!node_ || !node_->has_grad()) return Tensor::zeros_like(node_->value);
  return node_->grad;
}

void Var::zero_grad() {
  if (node_) node_->grad = Tensor();
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

Var constant(Tensor value) { return Var(std::move(value), false); }
Var detach(const Var& x) { return Var(x.value(), false); }

void backward(const Var& root) {
  if (root.value().size() != 1) throw ShapeError("backward() without seed needs a scalar root");
  backward(root, Tensor(root.shape(), 1.0));
}

void backward(const Var& root, const Tensor& seed) {
  require_same_shape(root.value(), seed, "backward seed");
  if (!root.requires_grad()) return;
  // Iterative post-order DFS over nodes that require grad.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.node().get(), 0);
  visited.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      Node* child = node->inputs[next++].get();
      if (child && child->requires_grad && visited.insert(child).second) stack.emplace_back(child, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root.node()->grad_buffer() += seed;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && n->has_grad()) n->backward_fn(*n);
  }
}

// ---------------------------------------------------------------- elementwise

Var relu(const Var& x) {
  return unary(x, [](double v) { return v > 0 ? v : 0.0; },
               [](double in, double) { return in > 0 ? 1.0 : 0.0; });
}

Var sigmoid(const Var& x) {
  return unary(
      x,
      [](double v) {
        if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
        const double e = std::exp(v);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var tanh(const Var& x) {
  return unary(x, [](double v) { return std::tanh(v); }, [](double, double y) { return 1.0 - y * y; });
}

Var exp(const Var& x) {
  return unary(x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Var log(const Var& x) {
  return unary(x, [](double v) { return std::log(v); }, [](double in, double) { return 1.0 / in; });
}

Var sqrt(const Var& x) {
  return unary(x, [](double v) { return std::sqrt(v); }, [](double, double y) { return 0.5 / y; });
}

Var square(const Var& x) {
  return unary(x, [](double v) { return v * v; }, [](double in, double) { return 2.0 * in; });
}

Var clamp(const Var& x, double lo, double hi) {
  return unary(x, [lo, hi](double v) { return std::clamp(v, lo, hi); },
               [lo, hi](double in, double) { return (in >= lo && in <= hi) ? 1.0 : 0.0; });
}

Var mul_scalar(const Var& x, double s) {
  return unary(x, [s](double v) { return v * s; }, [s](double, double) { return s; });
}

Var add_scalar(const Var& x, double s) {
  return unary(x, [s](double v) { return v + s; }, [](double, double) { return 1.0; });
}

Var add(const Var& a, const Var& b) { return binary(a, b, BinOp::kAdd, "add"); }
Var sub(const Var& a, const Var& b) { return binary(a, b, BinOp::kSub, "sub"); }
Var mul(const Var& a, const Var& b) { return binary(a, b, BinOp::kMul, "mul"); }
Var div(const Var& a, const Var& b) { return binary(a, b, BinOp::kDiv, "div"); }

// ---------------------------------------------------------------- reductions

Var sum(const Var& x) {
  return make_result(Tensor::scalar(x.value().sum()), {x}, [](Node& n) {
    Node* in = input_needing_grad(n, 0);
    if (!in) return;
    Tensor& g = in->grad_buffer();
    const double s = n.grad[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s;
  });
}

Var mean(const Var& x) {
  const double count = static_cast<double>(x.value().size());
  if (count == 0) throw ShapeError("mean of empty tensor");
  return mul_scalar(sum(x), 1.0 / count);
}

Var sum_squares(const Var& x) {
  double s = 0;
  for (double v : x.value().values()) s += v * v;
  return make_result(Tensor::scalar(s), {x}, [](Node& n) {
    Node* in = input_needing_grad(n, 0);
    if (!in) return;
    Tensor& g = in->grad_buffer();
    const double s = 2.0 * n.grad[0];
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * in->value[i];
  });
}

// ---------------------------------------------------------------- structure

Var reshape(const Var& x, Shape shape) {
  Tensor out = x.value().reshaped(std::move(shape));
  return make_result(std::move(out), {x}, [](Node& n) {
    Node* in = input_needing_grad(n, 0);
    if (!in) return;
    Tensor& g = in->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
  });
}

Var concat0(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat0 of no tensors");
  Shape shape = parts[0].shape();
  int total = 0;
  for (const Var& p : parts) {
    if (p.value().rank() != static_cast<int>(shape.size())) throw ShapeError("concat0 rank mismatch");
    for (std::size_t d = 1; d < shape.size(); ++d) {
      if (p.shape()[d] != shape[d]) {
        throw ShapeError("concat0: " + shape_str(p.shape()) + " vs " + shape_str(shape));
      }
    }
    total += p.dim(0);
  }
  shape[0] = total;
  Tensor out(shape);
  std::size_t offset = 0;
  for (const Var& p : parts) {
    std::copy(p.value().data(), p.value().data() + p.value().size(), out.data() + offset);
    offset += p.value().size();
  }
  return make_result(std::move(out), parts, [](Node& n) {
    std::size_t offset = 0;
    for (std::size_t k = 0; k < n.inputs.size(); ++k) {
      const std::size_t len = n.inputs[k]->value.size();
      if (Node* in = input_needing_grad(n, k)) {
        Tensor& g = in->grad_buffer();
        for (std::size_t i = 0; i < len; ++i) g[i] += n.grad[offset + i];
      }
      offset += len;
    }
  });
}

Var slice0(const Var& x, int begin, int end) {
  if (x.value().rank() < 1 || begin < 0 || end > x.dim(0) || begin >= end) {
    throw ShapeError("slice0 [" + std::to_string(begin) + "," + std::to_string(end) + ") of " +
                     shape_str(x.shape()));
  }
  Shape shape = x.shape();
  const std::size_t inner = x.value().size() / static_cast<std::size_t>(shape[0]);
  shape[0] = end - begin;
  Tensor out(shape);
  const std::size_t start = static_cast<std::size_t>(begin) * inner;
  std::copy(x.value().data() + start, x.value().data() + start + out.size(), out.data());
  return make_result(std::move(out), {x}, [start](Node& n) {
    Node* in = input_needing_grad(n, 0);
    if (!in) return;
    Tensor& g = in->grad_buffer();
    for (std::size_t i = 0; i < n.grad.size(); ++i) g[start + i] += n.grad[i];
  });
}

Var transpose2d(const Var& x) {
  require_rank(x, 2, "transpose2d");
  const int r = x.dim(0), c = x.dim(1);
  Tensor out({c, r});
  MatMap(out.data(), c, r) = ConstMatMap(x.value().data(), r, c).transpose();
  return make_result(std::move(out), {x}, [r, c](Node& n) {
    Node* in = input_needing_grad(n, 0);
    if (!in) return;
    MatMap(in->grad_buffer().data(), r, c) += ConstMatMap(n.grad.data(), c, r).transpose();
  });
}

Var matmul(const Var& a, const Var& b) {
  require_rank(a, 2, "matmul lhs");
  require_rank(b, 2, "matmul rhs");
  const int n = a.dim(0), k = a.dim(1), m = b.dim(1);
  if (b.dim(0) != k) throw ShapeError("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  Tensor out({n, m});
  MatMap(out.data(), n, m).noalias() = ConstMatMap(a.value().data(), n, k) * ConstMatMap(b.value().data(), k, m);
  return make_result(std::move(out), {a, b}, [n, k, m](Node& node) {
    ConstMatMap g(node.grad.data(), n, m);
    if (Node* na = input_needing_grad(node, 0)) {
      MatMap(na->grad_buffer().data(), n, k).noalias() +=
          g * ConstMatMap(node.inputs[1]->value.data(), k, m).transpose();
    }
    if (Node* nb = input_needing_grad(node, 1)) {
      MatMap(nb->grad_buffer().data(), k, m).noalias() +=
          ConstMatMap(node.inputs[0]->value.data(), n, k).transpose() * g;
    }
  });
}

// ---------------------------------------------------------------- feature maps

Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad) {
  require_rank(x, 3, "conv2d input");
  require_rank(weight, 4, "conv2d weight");
  const int cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int cout = weight.dim(0), k = weight.dim(2);
  if (weight.dim(1) != cin || weight.dim(3) != k) {
    throw ShapeError("conv2d: weight " + shape_str(weight.shape()) + " vs input " + shape_str(x.shape()));
  }
  if (bias.defined() && bias.shape() != Shape{cout}) throw ShapeError("conv2d: bias shape");
  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (w + 2 * pad - k) / stride + 1;
  if (ho <= 0 || wo <= 0) throw ShapeError("conv2d: empty output for " + shape_str(x.shape()));
  const int rows = cin * k * k;
  const int cols_n = ho * wo;
  const bool pointwise = (k == 1 && stride == 1 && pad == 0);

  Tensor cols;
  if (!pointwise) {
    cols = Tensor({rows, cols_n});
    const double* xin = x.value().data();
    double* cp = cols.data();
    for (int c = 0; c < cin; ++c) {
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          double* row = cp + static_cast<std::size_t>((c * k + ky) * k + kx) * cols_n;
          for (int oy = 0; oy < ho; ++oy) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= h) {
              std::fill(row + oy * wo, row + (oy + 1) * wo, 0.0);
              continue;
            }
            const double* src = xin + (static_cast<std::size_t>(c) * h + iy) * w;
            for (int ox = 0; ox < wo; ++ox) {
              const int ix = ox * stride - pad + kx;
              row[oy * wo + ox] = (ix >= 0 && ix < w) ? src[ix] : 0.0;
            }
          }
        }
      }
    }
  }
  const double* col_data = pointwise ? x.value().data() : cols.data();
  Tensor out({cout, ho, wo});
  MatMap om(out.data(), cout, cols_n);
  om.noalias() = ConstMatMap(weight.value().data(), cout, rows) * ConstMatMap(col_data, rows, cols_n);
  if (bias.defined()) {
    for (int o = 0; o < cout; ++o) om.row(o).array() += bias.value()[o];
  }

  std::vector<Var> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  return make_result(
      std::move(out), inputs,
      [cols = std::move(cols), pointwise, cin, h, w, cout, k, stride, pad, ho, wo, rows, cols_n](Node& n) {
        ConstMatMap g(n.grad.data(), cout, cols_n);
        const double* col_data = pointwise ? n.inputs[0]->value.data() : cols.data();
        if (Node* nw = input_needing_grad(n, 1)) {
          MatMap(nw->grad_buffer().data(), cout, rows).noalias() +=
              g * ConstMatMap(col_data, rows, cols_n).transpose();
        }
        if (n.inputs.size() > 2) {
          if (Node* nb = input_needing_grad(n, 2)) {
            Tensor& gb = nb->grad_buffer();
            for (int o = 0; o < cout; ++o) gb[o] += g.row(o).sum();
          }
        }
        Node* nx = input_needing_grad(n, 0);
        if (!nx) return;
        ConstMatMap wm(n.inputs[1]->value.data(), cout, rows);
        if (pointwise) {
          MatMap(nx->grad_buffer().data(), rows, cols_n).noalias() += wm.transpose() * g;
          return;
        }
        RowMat dcols = wm.transpose() * g;
        double* gx = nx->grad_buffer().data();
        for (int c = 0; c < cin; ++c) {
          for (int ky = 0; ky < k; ++ky) {
            for (int kx = 0; kx < k; ++kx) {
              const double* row = dcols.data() + static_cast<std::size_t>((c * k + ky) * k + kx) * cols_n;
              for (int oy = 0; oy < ho; ++oy) {
                const int iy = oy * stride - pad + ky;
                if (iy < 0 || iy >= h) continue;
                double* dst = gx + (static_cast<std::size_t>(c) * h + iy) * w;
                for (int ox = 0; ox < wo; ++ox) {
                  const int ix = ox * stride - pad + kx;
                  if (ix >= 0 && ix < w) dst[ix] += row[oy * wo + ox];
                }
              }
            }
          }
        }
      });
}

Var instance_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  require_rank(x, 3, "instance_norm");
  const int c = x.dim(0);
  const std::size_t hw = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
  if (gamma.shape() != Shape{c} || beta.shape() != Shape{c}) throw ShapeError("instance_norm: affine shape");
  Tensor xhat(x.shape());
  Tensor out(x.shape());
  std::vector<double> inv_std(c);
  for (int ch = 0; ch < c; ++ch) {
    const double* xp = x.value().data() + ch * hw;
    double m = 0;
    for (std::size_t i = 0; i < hw; ++i) m += xp[i];
    m /= static_cast<double>(hw);
    double var = 0;
    for (std::size_t i = 0; i < hw; ++i) var += (xp[i] - m) * (xp[i] - m);
    var /= static_cast<double>(hw);
    inv_std[ch] = 1.0 / std::sqrt(var + eps);
    const double gv = gamma.value()[ch], bv = beta.value()[ch];
    for (std::size_t i = 0; i < hw; ++i) {
      const double xh = (xp[i] - m) * inv_std[ch];
      xhat[ch * hw + i] = xh;
      out[ch * hw + i] = gv * xh + bv;
    }
  }
  return make_result(std::move(out), {x, gamma, beta},
                     [xhat = std::move(xhat), inv_std = std::move(inv_std), c, hw](Node& n) {
                       Node* nx = input_needing_grad(n, 0);
                       Node* ng = input_needing_grad(n, 1);
                       Node* nb = input_needing_grad(n, 2);
                       const Tensor& gamma = n.inputs[1]->value;
                       for (int ch = 0; ch < c; ++ch) {
                         const double* gy = n.grad.data() + ch * hw;
                         const double* xh = xhat.data() + ch * hw;
                         double sum_g = 0, sum_gx = 0;
                         for (std::size_t i = 0; i < hw; ++i) {
                           sum_g += gy[i];
                           sum_gx += gy[i] * xh[i];
                         }
                         if (ng) ng->grad_buffer()[ch] += sum_gx;
                         if (nb) nb->grad_buffer()[ch] += sum_g;
                         if (nx) {
                           double* gx = nx->grad_buffer().data() + ch * hw;
                           const double scale = gamma[ch] * inv_std[ch] / static_cast<double>(hw);
                           const double nhw = static_cast<double>(hw);
                           for (std::size_t i = 0; i < hw; ++i) {
                             gx[i] += scale * (nhw * gy[i] - sum_g - xh[i] * sum_gx);
                           }
                         }
                       }
                     });
}

Var resize_bilinear(const Var& x, int out_h, int out_w) {
  require_rank(x, 3, "resize_bilinear");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (out_h <= 0 || out_w <= 0) throw ShapeError("resize_bilinear: bad target size");
  if (h == out_h && w == out_w) return reshape(x, x.shape());
  AxisTable ty = axis_table(h, out_h);
  AxisTable tx = axis_table(w, out_w);
  Tensor out({c, out_h, out_w});
  const Tensor& in = x.value();
  for (int ch = 0; ch < c; ++ch) {
    for (int oy = 0; oy < out_h; ++oy) {
      const double wy = ty.w1[oy];
      const double* r0 = in.data() + (static_cast<std::size_t>(ch) * h + ty.i0[oy]) * w;
      const double* r1 = in.data() + (static_cast<std::size_t>(ch) * h + ty.i1[oy]) * w;
      for (int ox = 0; ox < out_w; ++ox) {
        const double wx = tx.w1[ox];
        const double top = r0[tx.i0[ox]] * (1 - wx) + r0[tx.i1[ox]] * wx;
        const double bot = r1[tx.i0[ox]] * (1 - wx) + r1[tx.i1[ox]] * wx;
        out.at(ch, oy, ox) = top * (1 - wy) + bot * wy;
      }
    }
  }
  return make_result(std::move(out), {x}, [ty, tx, c, h, w, out_h, out_w](Node& n) {
    Node* in = input_needing_grad(n, 0);
    if (!in) return;
    Tensor& g = in->grad_buffer();
    for (int ch = 0; ch < c; ++ch) {
      for (int oy = 0; oy < out_h; ++oy) {
        const double wy = ty.w1[oy];
        double* r0 = g.data() + (static_cast<std::size_t>(ch) * h + ty.i0[oy]) * w;
        double* r1 = g.data() + (static_cast<std::size_t>(ch) * h + ty.i1[oy]) * w;
        for (int ox = 0; ox < out_w; ++ox) {
          const double wx = tx.w1[ox];
          const double go = n.grad.at(ch, oy, ox);
          r0[tx.i0[ox]] += go * (1 - wy) * (1 - wx);
          r0[tx.i1[ox]] += go * (1 - wy) * wx;
          r1[tx.i0[ox]] += go * wy * (1 - wx);
          r1[tx.i1[ox]] += go * wy * wx;
        }
      }
    }
  });
}

Var channel_mean(const Var& x) {
  require_rank(x, 3, "channel_mean");
  const int c = x.dim(0);
  const std::size_t hw = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
  Tensor out({1, x.dim(1), x.dim(2)});
  for (int ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < hw; ++i) out[i] += x.value()[ch * hw + i];
  }
  out *= 1.0 / c;
  return make_result(std::move(out), {x}, [c, hw](Node& n) {
    Node* in = input_needing_grad(n, 0);
    if (!in) return;
    Tensor& g = in->grad_buffer();
    for (int ch = 0; ch < c; ++ch) {
      for (std::size_t i = 0; i < hw; ++i) g[ch * hw + i] += n.grad[i] / c;
    }
  });
}

Var channel_max(const Var& x) {
  require_rank(x, 3, "channel_max");
  const int c = x.dim(0);
  const std::size_t hw = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
  Tensor out({1, x.dim(1), x.dim(2)}, -std::numeric_limits<double>::infinity());
  std::vector<int> arg(hw, 0);
  for (int ch = 0; ch < c; ++ch) {
    for (std::size_t i = 0; i < hw; ++i) {
      const double v = x.value()[ch * hw + i];
      if (v > out[i]) {
        out[i] = v;
        arg[i] = ch;
      }
    }
  }
  return make_result(std::move(out), {x}, [arg = std::move(arg), hw](Node& n) {
    Node* in = input_needing_grad(n, 0);
    if (!in) return;
    Tensor& g = in->grad_buffer();
    for (std::size_t i = 0; i < hw; ++i) g[static_cast<std::size_t>(arg[i]) * hw + i] += n.grad[i];
  });
}

Var spatial_mean(const Var& x) {
  require_rank(x, 3, "spatial_mean");
  const int c = x.dim(0);
  const std::size_t hw = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
  Tensor out({c, 1, 1});
  for (int ch = 0; ch < c; ++ch) {
    double s = 0;
    for (std::size_t i = 0; i < hw; ++i) s += x.value()[ch * hw + i];
    out[ch] = s / static_cast<double>(hw);
  }
  return make_result(std::move(out), {x}, [c, hw](Node& n) {
    Node* in = input_needing_grad(n, 0);
    if (!in) return;
    Tensor& g = in->grad_buffer();
    for (int ch = 0; ch < c; ++ch) {
      const double gv = n.grad[ch] / static_cast<double>(hw);
      for (std::size_t i = 0; i < hw; ++i) g[ch * hw + i] += gv;
    }
  });
}

Var spatial_max(const Var& x) {
  require_rank(x, 3, "spatial_max");
  const int c = x.dim(0);
  const std::size_t hw = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
  Tensor out({c, 1, 1});
  std::vector<std::size_t> arg(c, 0);
  for (int ch = 0; ch < c; ++ch) {
    double best = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < hw; ++i) {
      const double v = x.value()[ch * hw + i];
      if (v > best) {
        best = v;
        arg[ch] = i;
      }
    }
    out[ch] = best;
  }
  return make_result(std::move(out), {x}, [arg = std::move(arg), c, hw](Node& n) {
    Node* in = input_needing_grad(n, 0);
    if (!in) return;
    Tensor& g = in->grad_buffer();
    for (int ch = 0; ch < c; ++ch) g[ch * hw + arg[ch]] += n.grad[ch];
  });
}

Var softmax0(const Var& x) {
  if (x.value().rank() < 1) throw ShapeError("softmax0 of scalar");
  const int c = x.dim(0);
  const std::size_t inner = x.value().size() / static_cast<std::size_t>(c);
  Tensor out(x.shape());
  for (std::size_t i = 0; i < inner; ++i) {
    double m = -std::numeric_limits<double>::infinity();
    for (int ch = 0; ch < c; ++ch) m = std::max(m, x.value()[ch * inner + i]);
    double s = 0;
    for (int ch = 0; ch < c; ++ch) {
      const double e = std::exp(x.value()[ch * inner + i] - m);
      out[ch * inner + i] = e;
      s += e;
    }
    for (int ch = 0; ch < c; ++ch) out[ch * inner + i] /= s;
  }
  return make_result(std::move(out), {x}, [c, inner](Node& n) {
    Node* in = input_needing_grad(n, 0);
    if (!in) return;
    Tensor& g = in->grad_buffer();
    for (std::size_t i = 0; i < inner; ++i) {
      double dot = 0;
      for (int ch = 0; ch < c; ++ch) dot += n.value[ch * inner + i] * n.grad[ch * inner + i];
      for (int ch = 0; ch < c; ++ch) {
        const std::size_t j = ch * inner + i;
        g[j] += n.value[j] * (n.grad[j] - dot);
      }
    }
  });
}

Var normalize0(const Var& x, double eps) {
  if (x.value().rank() < 1) throw ShapeError("normalize0 of scalar");
  const int c = x.dim(0);
  const std::size_t inner = x.value().size() / static_cast<std::size_t>(c);
  Tensor out(x.shape());
  std::vector<double> norms(inner);
  for (std::size_t i = 0; i < inner; ++i) {
    double s = 0;
    for (int ch = 0; ch < c; ++ch) s += x.value()[ch * inner + i] * x.value()[ch * inner + i];
    norms[i] = std::max(std::sqrt(s), eps);
    for (int ch = 0; ch < c; ++ch) out[ch * inner + i] = x.value()[ch * inner + i] / norms[i];
  }
  return make_result(std::move(out), {x}, [norms = std::move(norms), c, inner, eps](Node& n) {
    Node* in = input_needing_grad(n, 0);
    if (!in) return;
    Tensor& g = in->grad_buffer();
    for (std::size_t i = 0; i < inner; ++i) {
      const double nv = norms[i];
      if (nv <= eps) {
        for (int ch = 0; ch < c; ++ch) g[ch * inner + i] += n.grad[ch * inner + i] / eps;
        continue;
      }
      double dot = 0;
      for (int ch = 0; ch < c; ++ch) dot += n.value[ch * inner + i] * n.grad[ch * inner + i];
      for (int ch = 0; ch < c; ++ch) {
        const std::size_t j = ch * inner + i;
        g[j] += (n.grad[j] - n.value[j] * dot) / nv;
      }
    }
  });
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  require_rank(x, 1, "linear input");
  require_rank(weight, 2, "linear weight");
  const int in_dim = x.dim(0), out_dim = weight.dim(0);
  if (weight.dim(1) != in_dim) throw ShapeError("linear: weight " + shape_str(weight.shape()));
  Var col = reshape(x, {in_dim, 1});
  Var y = reshape(matmul(weight, col), {out_dim});
  return bias.defined() ? add(y, bias) : y;
}

Var masked_mean_columns(const Var& x, const Tensor& weights) {
  require_rank(x, 3, "masked_mean_columns");
  const int c = x.dim(0);
  const std::size_t hw = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
  if (weights.size() != hw) throw ShapeError("masked_mean_columns: mask size " + shape_str(weights.shape()));
  const double total = weights.sum();
  if (total <= 0) throw ShapeError("masked_mean_columns: empty mask");
  Tensor out({c});
  for (int ch = 0; ch < c; ++ch) {
    double s = 0;
    for (std::size_t i = 0; i < hw; ++i) s += weights[i] * x.value()[ch * hw + i];
    out[ch] = s / total;
  }
  return make_result(std::move(out), {x}, [weights, total, c, hw](Node& n) {
    Node* in = input_needing_grad(n, 0);
    if (!in) return;
    Tensor& g = in->grad_buffer();
    for (int ch = 0; ch < c; ++ch) {
      const double gv = n.grad[ch] / total;
      for (std::size_t i = 0; i < hw; ++i) g[ch * hw + i] += gv * weights[i];
    }
  });
}

Var channel_dot(const Var& x, const Var& v) {
  require_rank(x, 3, "channel_dot");
  const int c = x.dim(0);
  if (v.shape() != Shape{c}) throw ShapeError("channel_dot: vector " + shape_str(v.shape()));
  const std::size_t hw = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
  Tensor out({1, x.dim(1), x.dim(2)});
  for (int ch = 0; ch < c; ++ch) {
    const double vc = v.value()[ch];
    for (std::size_t i = 0; i < hw; ++i) out[i] += x.value()[ch * hw + i] * vc;
  }
  return make_result(std::move(out), {x, v}, [c, hw](Node& n) {
    Node* nx = input_needing_grad(n, 0);
    Node* nv = input_needing_grad(n, 1);
    const Tensor& xv = n.inputs[0]->value;
    const Tensor& vv = n.inputs[1]->value;
    for (int ch = 0; ch < c; ++ch) {
      if (nx) {
        double* gx = nx->grad_buffer().data() + ch * hw;
        for (std::size_t i = 0; i < hw; ++i) gx[i] += n.grad[i] * vv[ch];
      }
      if (nv) {
        double s = 0;
        for (std::size_t i = 0; i < hw; ++i) s += n.grad[i] * xv[ch * hw + i];
        nv->grad_buffer()[ch] += s;
      }
    }
  });
}

Var gather_columns(const Var& x, std::span<const int> pixels) {
  require_rank(x, 3, "gather_columns");
  const int c = x.dim(0);
  const std::size_t hw = static_cast<std::size_t>(x.dim(1)) * x.dim(2);
  const int m = static_cast<int>(pixels.size());
  Tensor out({m, c});
  for (int r = 0; r < m; ++r) {
    if (pixels[r] < 0 || static_cast<std::size_t>(pixels[r]) >= hw) throw ShapeError("gather_columns: index");
    for (int ch = 0; ch < c; ++ch) out[static_cast<std::size_t>(r) * c + ch] = x.value()[ch * hw + pixels[r]];
  }
  std::vector<int> idx(pixels.begin(), pixels.end());
  return make_result(std::move(out), {x}, [idx = std::move(idx), c, hw](Node& n) {
    Node* in = input_needing_grad(n, 0);
    if (!in) return;
    Tensor& g = in->grad_buffer();
    for (std::size_t r = 0; r < idx.size(); ++r) {
      for (int ch = 0; ch < c; ++ch) g[ch * hw + idx[r]] += n.grad[r * c + ch];
    }
  });
}

Var gather_rows(const Var& x, std::span<const int> rows) {
  require_rank(x, 2, "gather_rows");
  const int n_rows = x.dim(0), d = x.dim(1);
  const int m = static_cast<int>(rows.size());
  Tensor out({m, d});
  for (int r = 0; r < m; ++r) {
    if (rows[r] < 0 || rows[r] >= n_rows) throw ShapeError("gather_rows: index");
    std::copy(x.value().data() + static_cast<std::size_t>(rows[r]) * d,
              x.value().data() + static_cast<std::size_t>(rows[r] + 1) * d,
              out.data() + static_cast<std::size_t>(r) * d);
  }
  std::vector<int> idx(rows.begin(), rows.end());
  return make_result(std::move(out), {x}, [idx = std::move(idx), d](Node& n) {
    Node* in = input_needing_grad(n, 0);
    if (!in) return;
    Tensor& g = in->grad_buffer();
    for (std::size_t r = 0; r < idx.size(); ++r) {
      for (int j = 0; j < d; ++j) g[static_cast<std::size_t>(idx[r]) * d + j] += n.grad[r * d + j];
    }
  });
}

Var gradient_reversal(const Var& x, double lambda) {
  if (lambda < 0) throw std::invalid_argument("gradient_reversal: lambda must be >= 0");
  return make_result(x.value(), {x}, [lambda](Node& n) {
    Node* in = input_needing_grad(n, 0);
    if (!in) return;
    Tensor& g = in->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] -= lambda * n.grad[i];
  });
}

Var binary_cross_entropy(const Var& prob, const Tensor& target, double eps) {
  require_same_shape(prob.value(), target, "binary_cross_entropy");
  const std::size_t n = target.size();
  if (n == 0) throw ShapeError("binary_cross_entropy of empty tensor");
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    const double p = std::clamp(prob.value()[i], eps, 1.0 - eps);
    total -= target[i] * std::log(p) + (1.0 - target[i]) * std::log(1.0 - p);
  }
  return make_result(Tensor::scalar(total / static_cast<double>(n)), {prob}, [target, eps, n](Node& node) {
    Node* in = input_needing_grad(node, 0);
    if (!in) return;
    Tensor& g = in->grad_buffer();
    const double s = node.grad[0] / static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double raw = in->value[i];
      if (raw < eps || raw > 1.0 - eps) continue;
      g[i] += s * (-target[i] / raw + (1.0 - target[i]) / (1.0 - raw));
    }
  });
}

Var info_nce(const Var& anchors, const Var& positives, const Tensor& negatives,
             std::span<const std::uint8_t> neg_mask, double tau) {
  require_rank(anchors, 2, "info_nce anchors");
  require_same_shape(anchors.value(), positives.value(), "info_nce positives");
  if (!(tau > 0)) throw std::invalid_argument("info_nce: tau must be positive");
  const int n = anchors.dim(0), d = anchors.dim(1);
  const int m = negatives.empty() ? 0 : negatives.dim(0);
  if (m > 0 && (negatives.rank() != 2 || negatives.dim(1) != d)) throw ShapeError("info_nce: bank shape");
  if (neg_mask.size() != static_cast<std::size_t>(n) * m) throw ShapeError("info_nce: mask size");

  // Softmax weights over {positive, active negatives} per anchor, kept for backward.
  RowMat sims = RowMat::Zero(n, m);
  if (m > 0) {
    sims.noalias() = ConstMatMap(anchors.value().data(), n, d) * ConstMatMap(negatives.data(), m, d).transpose();
  }
  Tensor out({n});
  std::vector<double> q_pos(n);
  RowMat q_neg = RowMat::Zero(n, m);
  for (int i = 0; i < n; ++i) {
    double pos = 0;
    for (int j = 0; j < d; ++j) pos += anchors.value()[i * d + j] * positives.value()[i * d + j];
    const double l0 = pos / tau;
    double mx = l0;
    for (int j = 0; j < m; ++j) {
      if (neg_mask[static_cast<std::size_t>(i) * m + j]) mx = std::max(mx, sims(i, j) / tau);
    }
    double z = std::exp(l0 - mx);
    for (int j = 0; j < m; ++j) {
      if (neg_mask[static_cast<std::size_t>(i) * m + j]) {
        q_neg(i, j) = std::exp(sims(i, j) / tau - mx);
        z += q_neg(i, j);
      }
    }
    out[i] = -(l0 - mx) + std::log(z);
    q_pos[i] = std::exp(l0 - mx) / z;
    q_neg.row(i) /= z;
  }
  return make_result(std::move(out), {anchors, positives},
                     [negatives, q_pos = std::move(q_pos), q_neg = std::move(q_neg), n, d, m, tau](Node& node) {
                       Node* na = input_needing_grad(node, 0);
                       Node* np = input_needing_grad(node, 1);
                       const Tensor& a = node.inputs[0]->value;
                       const Tensor& p = node.inputs[1]->value;
                       for (int i = 0; i < n; ++i) {
                         const double gi = node.grad[i] / tau;
                         const double c0 = (q_pos[i] - 1.0) * gi;
                         if (na) {
                           double* ga = na->grad_buffer().data() + static_cast<std::size_t>(i) * d;
                           for (int j = 0; j < d; ++j) ga[j] += c0 * p[i * d + j];
                           for (int k = 0; k < m; ++k) {
                             const double w = q_neg(i, k) * gi;
                             if (w == 0) continue;
                             for (int j = 0; j < d; ++j) ga[j] += w * negatives[static_cast<std::size_t>(k) * d + j];
                           }
                         }
                         if (np) {
                           double* gp = np->grad_buffer().data() + static_cast<std::size_t>(i) * d;
                           for (int j = 0; j < d; ++j) gp[j] += c0 * a[i * d + j];
                         }
                       }
                     });
}

}  // namespace dcdnet::ag
