#pragma once

#include <functional>

#include "dcdnet/autograd.hpp"
#include "dcdnet/rng.hpp"

namespace testutil {

inline dcdnet::Tensor random_tensor(dcdnet::Shape shape, dcdnet::Rng& rng, double scale = 1.0) {
  dcdnet::Tensor t(std::move(shape));
  for (double& v : t.storage()) v = rng.normal(0.0, scale);
  return t;
}

inline dcdnet::Tensor numeric_grad(const std::function<double(const dcdnet::Tensor&)>& f, const dcdnet::Tensor& x,
                                   double h = 1e-5) {
  dcdnet::Tensor g = dcdnet::Tensor::zeros_like(x);
  dcdnet::Tensor probe = x;
  for (std::size_t i = 0; i < x.size(); ++i) {
    probe[i] = x[i] + h;
    const double up = f(probe);
    probe[i] = x[i] - h;
    const double down = f(probe);
    probe[i] = x[i];
    g[i] = (up - down) / (2 * h);
  }
  return g;
}

inline double rel_error(const dcdnet::Tensor& a, const dcdnet::Tensor& b) {
  double diff = 0, ref = 1e-12;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    ref = std::max(ref, std::abs(b[i]));
  }
  return diff / ref;
}

// Autograd gradient of f at x next to its finite-difference estimate.
inline double grad_check(const std::function<dcdnet::ag::Var(const dcdnet::ag::Var&)>& f, const dcdnet::Tensor& x) {
  dcdnet::ag::Var v(x, true);
  dcdnet::ag::backward(f(v));
  const dcdnet::Tensor num = numeric_grad(
      [&f](const dcdnet::Tensor& t) {
        dcdnet::ag::NoGradGuard g;
        return f(dcdnet::ag::constant(t)).value()[0];
      },
      x);
  return rel_error(v.grad(), num);
}

}  // namespace testutil
