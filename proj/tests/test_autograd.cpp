#include <doctest.h>

#include "dcdnet/autograd.hpp"
#include "helpers.hpp"

using namespace dcdnet;
using testutil::grad_check;
using testutil::random_tensor;

TEST_CASE("elementwise and reduction gradients match finite differences") {
  Rng rng(1);
  const Tensor x = random_tensor({2, 3, 3}, rng);
  const Tensor w = random_tensor({2, 3, 3}, rng);
  auto head = [&w](const ag::Var& v) { return ag::sum(ag::constant(w) * v); };
  CHECK(grad_check([&](const ag::Var& v) { return head(ag::tanh(v)); }, x) < 1e-6);
  CHECK(grad_check([&](const ag::Var& v) { return head(ag::sigmoid(v)); }, x) < 1e-6);
  CHECK(grad_check([&](const ag::Var& v) { return ag::sum_squares(v); }, x) < 1e-6);
  CHECK(grad_check([&](const ag::Var& v) { return head(ag::softmax0(v)); }, x) < 1e-6);
  CHECK(grad_check([&](const ag::Var& v) { return head(ag::normalize0(v)); }, x) < 1e-6);
  CHECK(grad_check([&](const ag::Var& v) { return ag::sum(ag::spatial_mean(v)); }, x) < 1e-6);
}

TEST_CASE("feature-map op gradients match finite differences") {
  Rng rng(2);
  const Tensor x = random_tensor({3, 6, 6}, rng);
  const Tensor k = random_tensor({4, 3, 3, 3}, rng, 0.3);
  const Tensor b = random_tensor({4}, rng);
  const Tensor w4 = random_tensor({4, 3, 3}, rng);
  CHECK(grad_check(
            [&](const ag::Var& v) {
              return ag::sum(ag::constant(w4) * ag::conv2d(v, ag::constant(k), ag::constant(b), 2, 1));
            },
            x) < 1e-5);
  const Tensor w3 = random_tensor({3, 4, 4}, rng);
  CHECK(grad_check([&](const ag::Var& v) { return ag::sum(ag::constant(w3) * ag::resize_bilinear(v, 4, 4)); }, x) <
        1e-5);
  const Tensor g = random_tensor({3}, rng);
  const Tensor bt = random_tensor({3}, rng);
  const Tensor w6 = random_tensor({3, 6, 6}, rng);
  CHECK(grad_check(
            [&](const ag::Var& v) {
              return ag::sum(ag::constant(w6) * ag::instance_norm(v, ag::constant(g), ag::constant(bt)));
            },
            x) < 1e-4);
}

TEST_CASE("gradient reversal is the identity forward and flips the gradient") {
  Rng rng(3);
  const Tensor x0 = random_tensor({2, 2, 2}, rng);
  ag::Var x(x0, true);
  const ag::Var y = ag::gradient_reversal(x, 0.5);
  CHECK(y.value() == x0);
  ag::backward(ag::sum(ag::mul_scalar(y, 3.0)));
  const Tensor gx = x.grad();
  for (double v : gx.storage()) CHECK(v == doctest::Approx(-1.5));

  ag::Var z(x0, true);
  ag::backward(ag::sum(ag::gradient_reversal(z, 0.0)));
  CHECK(z.grad().abs_max() == 0.0);
}

TEST_CASE("no tape is recorded under NoGradGuard") {
  ag::Var x(Tensor({3}, 1.0), true);
  ag::NoGradGuard guard;
  const ag::Var y = ag::mul_scalar(x, 2.0);
  CHECK_FALSE(y.requires_grad());
}
