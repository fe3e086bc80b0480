#include "dcdnet/self_check.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <sstream>

#include "dcdnet/acfd.hpp"
#include "dcdnet/cam.hpp"
#include "dcdnet/mgdf.hpp"

namespace dcdnet::check {

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.storage()) v = rng.normal(0.0, scale);
  return t;
}

std::string fmt(double v) {
  std::ostringstream out;
  out.precision(3);
  out << std::scientific << v;
  return out.str();
}

double rel_error(const Tensor& a, const Tensor& b) {
  double diff = 0, ref = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    diff = std::max(diff, std::abs(a[i] - b[i]));
    ref = std::max(ref, std::abs(b[i]));
  }
  return diff / std::max(ref, 1e-12);
}

// Central differences of a scalar function of x.
Tensor numeric_grad(const std::function<double(const Tensor&)>& f, const Tensor& x, double h = 1e-5) {
  Tensor g = Tensor::zeros_like(x);
  Tensor probe = x;
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

// A nonlinear scalar head: sum(w * tanh(x) + 0.5 * x^2 * w).
ag::Var scalar_head(const ag::Var& x, const Tensor& w) {
  return ag::sum(ag::constant(w) * (ag::tanh(x) + ag::mul_scalar(ag::square(x), 0.5)));
}

CheckResult grl_gradient() {
  Rng rng(11);
  const double lambda = 0.7;
  const Tensor x0 = random_tensor({3, 4, 4}, rng);
  const Tensor w = random_tensor({3, 4, 4}, rng);
  ag::Var x(x0, true);
  ag::backward(scalar_head(acfd::grl_forward(x, {lambda}), w));
  const Tensor analytic = x.grad();
  Tensor expected = numeric_grad(
      [&w](const Tensor& t) {
        ag::NoGradGuard g;
        return scalar_head(ag::constant(t), w).value()[0];
      },
      x0);
  expected *= -lambda;
  const double err = rel_error(analytic, expected);
  return {"grl gradient is -lambda times the direct gradient", err < 1e-4, "rel err " + fmt(err)};
}

CheckResult ortho_zero() {
  // Shared channels live on the left half of the map, private channels on the right.
  Rng rng(12);
  Tensor s({4, 4, 4}), p({4, 4, 4});
  for (int c = 0; c < 4; ++c) {
    for (int y = 0; y < 4; ++y) {
      for (int x = 0; x < 4; ++x) {
        (x < 2 ? s : p).at(c, y, x) = rng.normal();
      }
    }
  }
  const std::vector<ag::Var> sv{ag::constant(s)}, pv{ag::constant(p)};
  const double v = acfd::orthogonality_loss(sv, pv).value()[0];
  return {"orthogonality loss is zero for cross-orthogonal features", std::abs(v) < 1e-12, "loss " + fmt(v)};
}

CheckResult ortho_one() {
  // Channel c is the indicator of pixel c: orthonormal columns, S = P.
  Tensor s({3, 3, 3});
  for (int c = 0; c < 3; ++c) s.at(c, c / 3, c % 3) = 1.0;
  const std::vector<ag::Var> sv{ag::constant(s)};
  const double v = acfd::orthogonality_loss(sv, sv).value()[0];
  return {"orthogonality loss is one for identical unit features", std::abs(v - 1.0) < 1e-12, "loss " + fmt(v)};
}

ModelConfig small_config() {
  ModelConfig cfg;
  cfg.c_f = 4;
  cfg.image_size = 32;
  cfg.init_seed = 5;
  return cfg;
}

acfd::DecomposedFeatures random_streams(int c, int h, Rng& rng) {
  return {ag::Var(random_tensor({c, h, h}, rng), true), ag::Var(random_tensor({c, h, h}, rng), true),
          ag::Var(random_tensor({c, h, h}, rng), true)};
}

CheckResult weights_sum_to_one() {
  Rng rng(13);
  const ModelConfig cfg = small_config();
  const mgdf::Mgdf m(cfg);
  double worst = 0;
  for (int trial = 0; trial < 5; ++trial) {
    ag::NoGradGuard g;
    const mgdf::FuseResult r = m.fuse(random_streams(cfg.c_f, 6, rng));
    const Tensor& a = r.weights.w_b.value();
    const Tensor& b = r.weights.w_s.value();
    const Tensor& c = r.weights.w_p.value();
    for (std::size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(a[i] + b[i] + c[i] - 1.0));
  }
  return {"fusion weights sum to one at every position", worst <= 1e-6, "max dev " + fmt(worst)};
}

CheckResult cam_identity() {
  Rng rng(14);
  const ModelConfig cfg = small_config();
  const cam::Cam cam(cfg, 3);
  ag::NoGradGuard g;
  const ag::Var s = ag::constant(random_tensor({cfg.c_f, 5, 5}, rng));
  const ag::Var p = ag::constant(random_tensor({cfg.c_f, 5, 5}, rng));
  const bool same = cam.forward(s, p).value() == p.value();
  return {"fresh modulation is the identity", same, same ? "exact" : "differs"};
}

// Per-pixel scalar re-implementation of the fusion.
Tensor fuse_oracle(mgdf::Mgdf& m, const acfd::DecomposedFeatures& f) {
  const Tensor& w_r = m.reduce().weight().value();
  const Tensor& b_r = m.reduce().bias().value();
  const Tensor& w_w = m.weight_conv().weight().value();
  const Tensor& b_w = m.weight_conv().bias().value();
  const Tensor& w_e = m.enhance().weight().value();
  const Tensor& b_e = m.enhance().bias().value();
  const Tensor* x[3] = {&f.base.value(), &f.shared.value(), &f.priv.value()};
  const int c = x[0]->dim(0), h = x[0]->dim(1), w = x[0]->dim(2);
  Tensor fc({c, h, w});
  for (int o = 0; o < c; ++o) {
    for (int y = 0; y < h; ++y) {
      for (int xx = 0; xx < w; ++xx) {
        double acc = b_r[static_cast<std::size_t>(o)];
        for (int k = 0; k < 3; ++k) {
          for (int i = 0; i < c; ++i) acc += w_r[static_cast<std::size_t>(o * 3 * c + k * c + i)] * x[k]->at(i, y, xx);
        }
        fc.at(o, y, xx) = acc;
      }
    }
  }
  Tensor out({c, h, w});
  for (int y = 0; y < h; ++y) {
    for (int xx = 0; xx < w; ++xx) {
      double logit[3];
      for (int k = 0; k < 3; ++k) {
        double acc = b_w[static_cast<std::size_t>(k)];
        for (int i = 0; i < c; ++i) {
          for (int dy = -1; dy <= 1; ++dy) {
            for (int dx = -1; dx <= 1; ++dx) {
              const int yy = y + dy, xs = xx + dx;
              if (yy < 0 || yy >= h || xs < 0 || xs >= w) continue;
              acc += w_w[static_cast<std::size_t>(((k * c + i) * 3 + dy + 1) * 3 + dx + 1)] * fc.at(i, yy, xs);
            }
          }
        }
        logit[k] = acc;
      }
      const double mx = std::max({logit[0], logit[1], logit[2]});
      double wk[3], z = 0;
      for (int k = 0; k < 3; ++k) z += wk[k] = std::exp(logit[k] - mx);
      for (int o = 0; o < c; ++o) {
        double enh = b_e[static_cast<std::size_t>(o)];
        for (int i = 0; i < c; ++i) enh += w_e[static_cast<std::size_t>(o * c + i)] * fc.at(i, y, xx);
        double v = fc.at(o, y, xx) + enh;
        for (int k = 0; k < 3; ++k) v += wk[k] / z * x[k]->at(o, y, xx);
        out.at(o, y, xx) = v;
      }
    }
  }
  return out;
}

CheckResult fuse_matches_oracle() {
  Rng rng(15);
  const ModelConfig cfg = small_config();
  mgdf::Mgdf m(cfg);
  double worst = 0;
  for (int trial = 0; trial < 3; ++trial) {
    const acfd::DecomposedFeatures f = random_streams(cfg.c_f, 5, rng);
    ag::NoGradGuard g;
    const Tensor got = m.fuse(f).fused.value();
    const Tensor want = fuse_oracle(m, f);
    for (std::size_t i = 0; i < got.size(); ++i) worst = std::max(worst, std::abs(got[i] - want[i]));
  }
  return {"fusion matches the per-pixel oracle", worst <= 1e-5, "max abs err " + fmt(worst)};
}

CheckResult fuse_gradients() {
  Rng rng(16);
  const ModelConfig cfg = small_config();
  const mgdf::Mgdf m(cfg);
  const acfd::DecomposedFeatures f = random_streams(cfg.c_f, 4, rng);
  const Tensor w = random_tensor({cfg.c_f, 4, 4}, rng);
  ag::backward(ag::sum(ag::constant(w) * m.fuse(f).fused));
  double worst = 0;
  const ag::Var* inputs[3] = {&f.base, &f.shared, &f.priv};
  for (int k = 0; k < 3; ++k) {
    const Tensor num = numeric_grad(
        [&](const Tensor& t) {
          ag::NoGradGuard g;
          acfd::DecomposedFeatures probe{ag::constant(f.base.value()), ag::constant(f.shared.value()),
                                         ag::constant(f.priv.value())};
          (k == 0 ? probe.base : k == 1 ? probe.shared : probe.priv) = ag::constant(t);
          return ag::sum(ag::constant(w) * m.fuse(probe).fused).value()[0];
        },
        inputs[k]->value());
    worst = std::max(worst, rel_error(inputs[k]->grad(), num));
  }
  return {"fusion gradients match finite differences", worst < 1e-4, "rel err " + fmt(worst)};
}

CheckResult losses_have_finite_gradients() {
  Rng rng(17);
  ModelConfig cfg = small_config();
  cfg.d_proj = 8;
  const acfd::Discriminator disc(cfg);
  const acfd::ProjectionHead head(cfg);
  std::vector<ag::Var> s, p;
  std::vector<data::MaskGrid> masks;
  std::vector<int> classes;
  for (int b = 0; b < 3; ++b) {
    s.emplace_back(random_tensor({cfg.c_f, 4, 4}, rng), true);
    p.emplace_back(random_tensor({cfg.c_f, 4, 4}, rng), true);
    data::MaskGrid m(4, 4);
    for (int i = 0; i < 6; ++i) m.labels[static_cast<std::size_t>(rng.uniform_int(0, 15))] = 1;
    masks.push_back(m);
    classes.push_back(b % 2);
  }
  acfd::MemoryBank bank(64, cfg.d_proj);
  for (int i = 0; i < 16; ++i) {
    std::vector<double> e(static_cast<std::size_t>(cfg.d_proj));
    for (double& v : e) v = rng.normal();
    bank.enqueue(e, i % 3 - 1);
  }
  acfd::ContrastiveOptions opt;
  opt.seed = 3;
  const ag::Var adv = acfd::adversarial_loss(std::span(s).subspan(0, 2), std::span(s).subspan(2), disc, {});
  const ag::Var cont = acfd::contrastive_loss(p, masks, classes, bank, head, opt).loss;
  const ag::Var ortho = acfd::orthogonality_loss(s, p);
  ag::backward(adv + cont + ortho);
  bool ok = adv.value().all_finite() && cont.value().all_finite() && ortho.value().all_finite();
  for (const auto* list : {&s, &p}) {
    for (const ag::Var& v : *list) ok = ok && v.grad().all_finite();
  }
  return {"decomposition losses have finite gradients", ok, ok ? "finite" : "non-finite value or gradient"};
}

}  // namespace

std::vector<CheckResult> run_self_check(bool corrupt_grl) {
  const bool previous = acfd::grl_sign_corrupted();
  acfd::set_grl_sign_corruption(corrupt_grl);
  std::vector<CheckResult> out;
  try {
    out.push_back(grl_gradient());
    out.push_back(ortho_zero());
    out.push_back(ortho_one());
    out.push_back(weights_sum_to_one());
    out.push_back(cam_identity());
    out.push_back(fuse_matches_oracle());
    out.push_back(fuse_gradients());
    out.push_back(losses_have_finite_gradients());
  } catch (const std::exception& e) {
    out.push_back({"self-check raised", false, e.what()});
  }
  acfd::set_grl_sign_corruption(previous);
  return out;
}

bool all_passed(const std::vector<CheckResult>& results) {
  return !results.empty() &&
         std::all_of(results.begin(), results.end(), [](const CheckResult& r) { return r.passed; });
}

}  // namespace dcdnet::check
