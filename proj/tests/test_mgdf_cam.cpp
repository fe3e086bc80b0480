#include <doctest.h>

#include <cmath>

#include "dcdnet/cam.hpp"
#include "dcdnet/errors.hpp"
#include "dcdnet/mgdf.hpp"
#include "helpers.hpp"

using namespace dcdnet;
using testutil::random_tensor;

namespace {

ModelConfig small() {
  ModelConfig cfg;
  cfg.c_f = 4;
  cfg.init_seed = 21;
  return cfg;
}

acfd::DecomposedFeatures streams(int c, int h, Rng& rng) {
  return {ag::constant(random_tensor({c, h, h}, rng)), ag::constant(random_tensor({c, h, h}, rng)),
          ag::constant(random_tensor({c, h, h}, rng))};
}

}  // namespace

TEST_CASE("fuse_concat is an affine 1x1 conv") {
  const ModelConfig cfg = small();
  mgdf::Mgdf m(cfg);
  Rng rng(1);
  ag::NoGradGuard g;
  const acfd::DecomposedFeatures zero{ag::constant(Tensor({4, 3, 3})), ag::constant(Tensor({4, 3, 3})),
                                      ag::constant(Tensor({4, 3, 3}))};
  const Tensor bias_map = m.fuse_concat(zero).value();
  CHECK(bias_map.shape() == Shape{4, 3, 3});
  for (int c = 0; c < 4; ++c) CHECK(bias_map.at(c, 1, 2) == m.reduce().bias().value()[static_cast<std::size_t>(c)]);

  const acfd::DecomposedFeatures f = streams(4, 3, rng);
  const double a = 2.5;
  const acfd::DecomposedFeatures fa{ag::mul_scalar(f.base, a), ag::mul_scalar(f.shared, a),
                                    ag::mul_scalar(f.priv, a)};
  const Tensor y = m.fuse_concat(f).value(), ya = m.fuse_concat(fa).value();
  for (std::size_t i = 0; i < y.size(); ++i) {
    CHECK(ya[i] == doctest::Approx(a * (y[i] - bias_map[i]) + bias_map[i]).epsilon(1e-10));
  }
}

TEST_CASE("fusion weights are a pointwise softmax") {
  const ModelConfig cfg = small();
  const mgdf::Mgdf m(cfg);
  Rng rng(2);
  ag::NoGradGuard g;
  const ag::Var fc = ag::constant(random_tensor({4, 3, 3}, rng));

  const Tensor zeros({3, 3, 3});
  const mgdf::FusionWeights third = m.fusion_weights(fc, &zeros);
  for (double v : third.w_b.value().storage()) CHECK(v == doctest::Approx(1.0 / 3));

  Tensor l({3, 3, 3});
  for (int y = 0; y < 3; ++y) {
    for (int x = 0; x < 3; ++x) l.at(0, y, x) = std::log(2.0);
  }
  const mgdf::FusionWeights w = m.fusion_weights(fc, &l);
  CHECK(w.w_b.value()[4] == doctest::Approx(0.5));
  CHECK(w.w_s.value()[4] == doctest::Approx(0.25));
  CHECK(w.w_p.value()[4] == doctest::Approx(0.25));
  CHECK(w.w_b.shape() == Shape{1, 3, 3});

  const Tensor random_logits = random_tensor({3, 3, 3}, rng, 3.0);
  const mgdf::FusionWeights r = m.fusion_weights(fc, &random_logits);
  for (int i = 0; i < 9; ++i) {
    double z = 0;
    for (int k = 0; k < 3; ++k) z += std::exp(random_logits[static_cast<std::size_t>(k * 9 + i)]);
    CHECK(r.w_s.value()[static_cast<std::size_t>(i)] ==
          doctest::Approx(std::exp(random_logits[static_cast<std::size_t>(9 + i)]) / z).epsilon(1e-12));
    const double sum = r.w_b.value()[static_cast<std::size_t>(i)] + r.w_s.value()[static_cast<std::size_t>(i)] +
                       r.w_p.value()[static_cast<std::size_t>(i)];
    CHECK(std::abs(sum - 1.0) <= 1e-6);
  }
}

TEST_CASE("weighted fusion selector and convexity cases") {
  const ModelConfig cfg = small();
  const mgdf::Mgdf m(cfg);
  Rng rng(3);
  ag::NoGradGuard g;
  const acfd::DecomposedFeatures f = streams(4, 3, rng);
  mgdf::FuseOptions opt;
  opt.enhancement = false;

  Tensor select({3, 3, 3}, -1e3);
  for (int i = 0; i < 9; ++i) select[static_cast<std::size_t>(i)] = 1e3;
  opt.logits_override = &select;
  CHECK(m.fuse(f, opt).fused.value() == f.base.value());

  const acfd::DecomposedFeatures same{f.priv, f.priv, f.priv};
  opt.logits_override = nullptr;
  const Tensor out = m.fuse(same, opt).fused.value();
  for (std::size_t i = 0; i < out.size(); ++i) CHECK(out[i] == doctest::Approx(f.priv.value()[i]).epsilon(1e-12));

  const Tensor convex = m.fuse(f, opt).fused.value();
  for (std::size_t i = 0; i < convex.size(); ++i) {
    const double a = f.base.value()[i], b = f.shared.value()[i], c = f.priv.value()[i];
    CHECK(convex[i] >= std::min({a, b, c}) - 1e-12);
    CHECK(convex[i] <= std::max({a, b, c}) + 1e-12);
  }
}

TEST_CASE("fusion gradients match finite differences on 4x4 inputs") {
  const ModelConfig cfg = small();
  const mgdf::Mgdf m(cfg);
  Rng rng(4);
  const acfd::DecomposedFeatures f = streams(4, 4, rng);
  const Tensor w = random_tensor({4, 4, 4}, rng);
  for (int k = 0; k < 3; ++k) {
    const double err = testutil::grad_check(
        [&](const ag::Var& x) {
          acfd::DecomposedFeatures probe = f;
          (k == 0 ? probe.base : k == 1 ? probe.shared : probe.priv) = x;
          return ag::sum(ag::constant(w) * m.fuse(probe).fused);
        },
        (k == 0 ? f.base : k == 1 ? f.shared : f.priv).value());
    CHECK(err < 1e-4);
  }
}

TEST_CASE("fusion with fewer streams and bad shapes") {
  ModelConfig cfg = small();
  const mgdf::Mgdf two(cfg, {false, true, true});
  Rng rng(5);
  ag::NoGradGuard g;
  const acfd::DecomposedFeatures f = streams(4, 3, rng);
  const mgdf::FuseResult r = two.fuse(f);
  CHECK_FALSE(r.weights.w_b.defined());
  CHECK(r.fused.shape() == Shape{4, 3, 3});
  CHECK_THROWS(mgdf::Mgdf(cfg, {false, false, false}));
  const acfd::DecomposedFeatures bad{f.base, ag::constant(Tensor({4, 2, 2})), f.priv};
  CHECK_THROWS_AS(mgdf::Mgdf(cfg).fuse(bad), ShapeError);
}

TEST_CASE("modulation") {
  Rng rng(6);
  const ModelConfig cfg = small();
  ag::NoGradGuard g;
  const ag::Var p = ag::constant(random_tensor({4, 3, 3}, rng));
  const ag::Var zero = ag::constant(Tensor({4, 3, 3}));

  SUBCASE("identity at zero") { CHECK(cam::modulate(p, {zero, zero}).value() == p.value()); }
  SUBCASE("gamma of -1 leaves only beta") {
    const ag::Var beta = ag::constant(random_tensor({4, 3, 3}, rng));
    CHECK(cam::modulate(p, {ag::constant(Tensor({4, 3, 3}, -1.0)), beta}).value() == beta.value());
  }
  SUBCASE("elementwise oracle and bound") {
    for (int trial = 0; trial < 5; ++trial) {
      Tensor gt = random_tensor({4, 3, 3}, rng), bt = random_tensor({4, 3, 3}, rng);
      for (double& v : gt.storage()) v = std::tanh(v);
      for (double& v : bt.storage()) v = std::tanh(v);
      const Tensor out = cam::modulate(p, {ag::constant(gt), ag::constant(bt)}).value();
      for (std::size_t i = 0; i < out.size(); ++i) {
        CHECK(out[i] == doctest::Approx(p.value()[i] * (1 + gt[i]) + bt[i]).epsilon(1e-12));
        CHECK(std::abs(out[i]) <= 2 * std::abs(p.value()[i]) + 1 + 1e-12);
      }
    }
  }
  SUBCASE("fresh module is the identity and its parameters start at zero") {
    cam::Cam c(cfg, 7);
    const ag::Var s = ag::constant(random_tensor({4, 3, 3}, rng));
    CHECK(c.forward(s, p).value() == p.value());
    const cam::ModulationParams mp = c.gen_params(c.interact(s, p));
    CHECK(mp.gamma.value().abs_max() == 0.0);
    CHECK(mp.beta.value().abs_max() == 0.0);
  }
  SUBCASE("interaction is non-negative, parameters bounded and monotone") {
    cam::Cam c(cfg, 8);
    for (double& v : c.param_conv().weight().mutable_value().storage()) v = rng.normal();
    const ag::Var s = ag::constant(random_tensor({4, 3, 3}, rng));
    const ag::Var fa = c.interact(s, p);
    CHECK(fa.shape() == Shape{4, 3, 3});
    for (double v : fa.value().storage()) CHECK(v >= 0.0);
    const cam::ModulationParams mp = c.gen_params(fa);
    for (double v : mp.gamma.value().storage()) CHECK(std::abs(v) <= 1.0);
    for (double v : mp.beta.value().storage()) CHECK(std::abs(v) <= 1.0);
    const Tensor before = mp.gamma.value();
    c.param_conv().bias().mutable_value()[0] += 0.5;
    const Tensor after = c.gen_params(fa).gamma.value();
    for (int i = 0; i < 9; ++i) CHECK(after[static_cast<std::size_t>(i)] >= before[static_cast<std::size_t>(i)]);
    const ag::Var zero_in = c.interact(zero, zero);
    for (int ch = 0; ch < 4; ++ch) {
      CHECK(zero_in.value().at(ch, 1, 1) == std::max(0.0, c.interact_conv().bias().value()[static_cast<std::size_t>(ch)]));
    }
  }
}
