#include <doctest.h>

#include <cmath>

#include "dcdnet/acfd.hpp"
#include "dcdnet/errors.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

using namespace dcdnet;
using testutil::random_tensor;

namespace {

ModelConfig small() {
  ModelConfig cfg;
  cfg.image_size = 32;
  cfg.c_shared = 8;
  cfg.c_private = 12;
  cfg.c_f = 6;
  cfg.d_proj = 5;
  cfg.disc_hidden = 7;
  cfg.init_seed = 3;
  return cfg;
}

std::vector<double> row(const Tensor& t, int i) {
  const int d = t.dim(1);
  return {t.data() + static_cast<std::ptrdiff_t>(i) * d, t.data() + static_cast<std::ptrdiff_t>(i + 1) * d};
}

Tensor unit_rows(int n, int d, Rng& rng) {
  Tensor t({n, d});
  for (int i = 0; i < n; ++i) {
    double s = 0;
    for (int j = 0; j < d; ++j) s += std::pow(t[static_cast<std::size_t>(i * d + j)] = rng.normal(), 2);
    for (int j = 0; j < d; ++j) t[static_cast<std::size_t>(i * d + j)] /= std::sqrt(s);
  }
  return t;
}

}  // namespace

TEST_CASE("shared branch gate overrides") {
  const ModelConfig cfg = small();
  acfd::SharedBranch br(cfg);
  Rng rng(1);
  const ag::Var low = ag::constant(random_tensor({cfg.c_shared, cfg.low_size(), cfg.low_size()}, rng));
  ag::NoGradGuard g;
  const Tensor zeros({1, cfg.low_size(), cfg.low_size()}, 0.0);
  const Tensor ones({1, cfg.low_size(), cfg.low_size()}, 1.0);
  const Tensor twos({1, cfg.low_size(), cfg.low_size()}, 2.0);

  const acfd::BranchOutput z = br.forward(low, &zeros);
  CHECK(z.gated.value().abs_max() == 0.0);
  const acfd::BranchOutput z2 = br.forward(ag::constant(random_tensor(low.shape(), rng)), &zeros);
  CHECK(z.output.value() == z2.output.value());  // projection bias only

  const acfd::BranchOutput o = br.forward(low, &ones);
  const acfd::BranchOutput t = br.forward(low, &twos);
  for (std::size_t i = 0; i < o.output.value().size(); ++i) {
    const double bias = z.output.value()[i];
    CHECK(t.output.value()[i] - bias == doctest::Approx(2 * (o.output.value()[i] - bias)).epsilon(1e-9));
  }
  CHECK(o.output.shape() == Shape{cfg.c_f, cfg.high_size(), cfg.high_size()});
  CHECK_THROWS_AS(br.forward(ag::constant(Tensor({cfg.c_shared, cfg.high_size(), cfg.high_size()}))), ShapeError);
}

TEST_CASE("private branch channel gate is per channel") {
  const ModelConfig cfg = small();
  acfd::PrivateBranch br(cfg);
  Rng rng(2);
  const ag::Var high = ag::constant(random_tensor({cfg.c_private, cfg.high_size(), cfg.high_size()}, rng));
  ag::NoGradGuard g;
  const Tensor ones({cfg.c_private, 1, 1}, 1.0);
  Tensor one_off = ones;
  one_off[3] = 0.0;
  const Tensor a = br.forward(high, &ones).gated.value();
  const Tensor b = br.forward(high, &one_off).gated.value();
  const int hw = cfg.high_size() * cfg.high_size();
  for (int c = 0; c < cfg.c_private; ++c) {
    for (int k = 0; k < hw; ++k) {
      const std::size_t i = static_cast<std::size_t>(c * hw + k);
      if (c == 3) {
        CHECK(b[i] == 0.0);
      } else {
        CHECK(b[i] == a[i]);
      }
    }
  }
  CHECK(br.forward(high).output.shape() == Shape{cfg.c_f, cfg.high_size(), cfg.high_size()});
}

TEST_CASE("attention gates are bounded and follow their statistics") {
  Rng rng(3);
  acfd::SpatialAttention sa("sa", rng);
  acfd::ChannelAttention ca("ca", 8, 4, rng);
  ag::NoGradGuard g;
  const ag::Var x = ag::constant(random_tensor({8, 10, 10}, rng));
  const Tensor s = sa.forward(x).value();
  CHECK(s.shape() == Shape{1, 10, 10});
  for (double v : s.storage()) CHECK((v > 0 && v < 1));
  const Tensor c = ca.forward(x).value();
  CHECK(c.shape() == Shape{8, 1, 1});
  for (double v : c.storage()) CHECK((v > 0 && v < 1));

  // Constant input: gates agree wherever the 7x7 window stays inside the map.
  const Tensor flat = sa.forward(ag::constant(Tensor({8, 10, 10}, 0.4))).value();
  for (int y = 3; y < 7; ++y) {
    for (int xx = 3; xx < 7; ++xx) CHECK(flat.at(0, y, xx) == doctest::Approx(flat.at(0, 3, 3)).epsilon(1e-12));
  }
  // Channel gates only see pooled statistics, so a spatial shuffle changes nothing.
  Tensor shuffled = x.value();
  for (int ch = 0; ch < 8; ++ch) std::swap(shuffled.at(ch, 0, 0), shuffled.at(ch, 9, 9));
  CHECK(ca.forward(ag::constant(shuffled)).value() == c);
}

TEST_CASE("gradient reversal layer") {
  Rng rng(4);
  const Tensor x0 = random_tensor({3, 4, 4}, rng);
  const Tensor w = random_tensor({3, 4, 4}, rng);
  auto f = [&w](const ag::Var& v) { return ag::sum(ag::constant(w) * ag::tanh(v)); };

  SUBCASE("forward is the identity") { CHECK(acfd::grl_forward(ag::constant(x0), {0.8}).value() == x0); }
  SUBCASE("gradient is -lambda times the direct gradient") {
    for (double lambda : {1.0, 0.3}) {
      ag::Var x(x0, true);
      ag::backward(f(acfd::grl_forward(x, {lambda})));
      Tensor expected = testutil::numeric_grad(
          [&](const Tensor& t) {
            ag::NoGradGuard g;
            return f(ag::constant(t)).value()[0];
          },
          x0);
      expected *= -lambda;
      CHECK(testutil::rel_error(x.grad(), expected) < 1e-4);
    }
  }
  SUBCASE("lambda zero blocks the gradient") {
    ag::Var x(x0, true);
    ag::backward(f(acfd::grl_forward(x, {0.0})));
    CHECK(x.grad().abs_max() == 0.0);
  }
  SUBCASE("warm-up ramps linearly to the maximum") {
    CHECK(acfd::grl_lambda_at(1.0, 0, 100) == 0.0);
    CHECK(acfd::grl_lambda_at(1.0, 5, 100) == doctest::Approx(0.5));
    CHECK(acfd::grl_lambda_at(1.0, 10, 100) == 1.0);
    CHECK(acfd::grl_lambda_at(2.0, 90, 100) == 2.0);
  }
}

TEST_CASE("discriminator pools globally") {
  ModelConfig cfg = small();
  const acfd::Discriminator d(cfg);
  Rng rng(5);
  ag::NoGradGuard g;
  CHECK(d.output_dim() == 1);
  const Tensor x = random_tensor({cfg.c_f, 4, 4}, rng);
  Tensor perm = x;
  for (int c = 0; c < cfg.c_f; ++c) std::swap(perm.at(c, 0, 1), perm.at(c, 3, 2));
  CHECK(d.discriminate(ag::constant(x)).value()[0] == doctest::Approx(d.discriminate(ag::constant(perm)).value()[0]));
  cfg.disc_class_head = true;
  CHECK(acfd::Discriminator(cfg).output_dim() == 1 + cfg.num_source_classes);
}

TEST_CASE("adversarial loss") {
  SUBCASE("chance-level discriminator gives 2 log 0.5") {
    const std::vector<ag::Var> half{ag::constant(Tensor({1}, 0.5)), ag::constant(Tensor({1}, 0.5))};
    CHECK(acfd::adversarial_loss_from_probs(half, half).value()[0] == doctest::Approx(-1.3862943611).epsilon(1e-9));
  }
  SUBCASE("a perfect discriminator approaches zero") {
    const std::vector<ag::Var> one{ag::constant(Tensor({1}, 1.0))}, zero{ag::constant(Tensor({1}, 0.0))};
    CHECK(std::abs(acfd::adversarial_loss_from_probs(one, zero).value()[0]) < 1e-6);
  }
  SUBCASE("empty batch is an error") {
    const std::vector<ag::Var> none, one{ag::constant(Tensor({1}, 0.5))};
    CHECK_THROWS(acfd::adversarial_loss_from_probs(none, one));
  }
  SUBCASE("matches the scalar oracle on random batches") {
    const ModelConfig cfg = small();
    const acfd::Discriminator d(cfg);
    Rng rng(6);
    for (int trial = 0; trial < 10; ++trial) {
      std::vector<ag::Var> src, tgt;
      std::vector<double> ls, lt;
      for (int i = 0; i < 3; ++i) {
        src.push_back(ag::constant(random_tensor({cfg.c_f, 4, 4}, rng, 2.0)));
        tgt.push_back(ag::constant(random_tensor({cfg.c_f, 4, 4}, rng, 2.0)));
        ls.push_back(d.discriminate(src.back()).value()[0]);
        lt.push_back(d.discriminate(tgt.back()).value()[0]);
      }
      const double got = acfd::adversarial_loss(src, tgt, d, {}).value()[0];
      CHECK(got == doctest::Approx(oracle::adversarial(ls, lt)).epsilon(1e-6));
    }
  }
}

TEST_CASE("memory bank keeps unit rows in FIFO order") {
  acfd::MemoryBank bank(4, 3);
  Rng rng(7);
  for (int i = 0; i < 9; ++i) {
    bank.enqueue(std::vector<double>{rng.normal(), rng.normal(), rng.normal()}, i);
    CHECK(bank.size() <= 4);
    for (int j = 0; j < bank.size(); ++j) {
      double s = 0;
      for (double v : bank.embedding(j)) s += v * v;
      CHECK(s == doctest::Approx(1.0));
    }
  }
  CHECK(bank.labels() == std::vector<int>{5, 6, 7, 8});
  bank.enqueue(std::vector<double>{0, 0, 0}, 99);
  CHECK(bank.labels().back() == 8);
  CHECK(bank.embeddings().shape() == Shape{4, 3});
}

TEST_CASE("contrastive loss") {
  SUBCASE("one positive at similarity 1 and one orthogonal negative") {
    acfd::MemoryBank bank(8, 2);
    bank.enqueue(std::vector<double>{0, 1}, 1);
    const ag::Var z = ag::constant(Tensor({2, 2}, {1, 0, 1, 0}));
    const std::vector<int> labels{0, 0};
    const auto r = acfd::contrastive_loss_embeddings(z, labels, bank, 1.0, 1);
    CHECK(r.loss.value()[0] == doctest::Approx(-std::log(std::exp(1.0) / (std::exp(1.0) + 1))).epsilon(1e-12));
    CHECK(r.loss.value()[0] == doctest::Approx(0.3133).epsilon(1e-4));
  }
  SUBCASE("equal similarities give log(m + 1)") {
    acfd::MemoryBank bank(8, 2);
    for (int i = 0; i < 3; ++i) bank.enqueue(std::vector<double>{0.6, 0.8}, 5 + i);
    const ag::Var z = ag::constant(Tensor({2, 2}, {0.6, 0.8, 0.6, 0.8}));
    const std::vector<int> labels{1, 1};
    for (double tau : {0.1, 1.0}) {
      CHECK(acfd::contrastive_loss_embeddings(z, labels, bank, tau, 2).loss.value()[0] ==
            doctest::Approx(std::log(4.0)));
    }
  }
  SUBCASE("sharp temperature with the positive strictly closest tends to zero") {
    acfd::MemoryBank bank(8, 2);
    bank.enqueue(std::vector<double>{0, 1}, 1);
    const ag::Var z = ag::constant(Tensor({2, 2}, {1, 0, 1, 0}));
    const std::vector<int> labels{0, 0};
    CHECK(acfd::contrastive_loss_embeddings(z, labels, bank, 0.01, 1).loss.value()[0] < 1e-12);
  }
  SUBCASE("no positive anywhere flags no-pair and returns zero") {
    acfd::MemoryBank bank(8, 2);
    const ag::Var z = ag::constant(Tensor({2, 2}, {1, 0, 0, 1}));
    const std::vector<int> labels{0, 1};
    const auto r = acfd::contrastive_loss_embeddings(z, labels, bank, 0.1, 1);
    CHECK(r.no_pair);
    CHECK(r.loss.value()[0] == 0.0);
  }
  SUBCASE("bank positive is used when the batch has none") {
    acfd::MemoryBank bank(8, 2);
    bank.enqueue(std::vector<double>{1, 0}, 0);
    bank.enqueue(std::vector<double>{0, 1}, 1);
    const ag::Var z = ag::constant(Tensor({1, 2}, {1, 0}));
    const std::vector<int> labels{0};
    const auto r = acfd::contrastive_loss_embeddings(z, labels, bank, 1.0, 1);
    CHECK_FALSE(r.no_pair);
    CHECK(r.loss.value()[0] == doctest::Approx(0.3132616875));
  }
  SUBCASE("matches the scalar oracle on random batches") {
    Rng rng(8);
    for (int trial = 0; trial < 10; ++trial) {
      const int d = 4, pairs = 3;
      const Tensor zt = unit_rows(2 * pairs, d, rng);
      const Tensor bt = unit_rows(6, d, rng);
      std::vector<int> labels, pos;
      for (int i = 0; i < 2 * pairs; ++i) {
        labels.push_back(i / 2);
        pos.push_back(i ^ 1);
      }
      acfd::MemoryBank bank(16, d);
      std::vector<std::vector<double>> z, b;
      std::vector<int> bl;
      for (int j = 0; j < 6; ++j) {
        bank.enqueue(row(bt, j), j % 4 - 1);
        b.push_back(row(bt, j));
        bl.push_back(j % 4 - 1);
      }
      for (int i = 0; i < 2 * pairs; ++i) z.push_back(row(zt, i));
      const double tau = 0.1 + 0.1 * trial;
      const double got = acfd::contrastive_loss_embeddings(ag::constant(zt), labels, bank, tau, 9).loss.value()[0];
      CHECK(got == doctest::Approx(oracle::contrastive(z, labels, pos, b, bl, tau)).epsilon(1e-6));
      CHECK(got >= 0.0);
    }
  }
  SUBCASE("pixel-level loss enqueues fresh embeddings") {
    const ModelConfig cfg = small();
    const acfd::ProjectionHead head(cfg);
    acfd::MemoryBank bank(64, cfg.d_proj);
    Rng rng(9);
    for (int i = 0; i < 10; ++i) {
      std::vector<double> e(static_cast<std::size_t>(cfg.d_proj));
      for (double& v : e) v = rng.normal();
      bank.enqueue(e, 7);
    }
    std::vector<ag::Var> priv{ag::Var(random_tensor({cfg.c_f, 4, 4}, rng), true),
                              ag::Var(random_tensor({cfg.c_f, 4, 4}, rng), true)};
    std::vector<data::MaskGrid> masks(2, data::MaskGrid(32, 32));
    for (auto& m : masks) {
      for (int y = 0; y < 16; ++y) {
        for (int x = 0; x < 16; ++x) m.at(y, x) = 1;
      }
    }
    const std::vector<int> classes{2, 2};
    acfd::ContrastiveOptions opt;
    const auto r = acfd::contrastive_loss(priv, masks, classes, bank, head, opt);
    CHECK(r.anchors > 0);
    CHECK(r.loss.value().all_finite());
    CHECK(bank.size() > 10);
    ag::backward(r.loss);
    CHECK(priv[0].grad().all_finite());
    CHECK(priv[0].grad().abs_max() > 0);
  }
}

TEST_CASE("orthogonality loss") {
  Tensor orth_s({2, 2, 2}), orth_p({2, 2, 2});
  orth_s.at(0, 0, 0) = 1;
  orth_s.at(1, 0, 1) = 2;
  orth_p.at(0, 1, 0) = 3;
  orth_p.at(1, 1, 1) = -1;
  Tensor unit({1, 2, 2});
  unit.at(0, 0, 0) = 1;
  const std::vector<ag::Var> os{ag::constant(orth_s)}, op{ag::constant(orth_p)}, u{ag::constant(unit)};

  CHECK(acfd::orthogonality_loss(os, op).value()[0] == 0.0);
  CHECK(acfd::orthogonality_loss(u, u).value()[0] == doctest::Approx(1.0));
  Tensor unit2({2, 2, 2});
  unit2.at(0, 0, 0) = 1;
  const std::vector<ag::Var> mixed_s{ag::constant(orth_s), ag::constant(unit2)},
      mixed_p{ag::constant(orth_p), ag::constant(unit2)};
  CHECK(acfd::orthogonality_loss(mixed_s, mixed_p).value()[0] == doctest::Approx(0.5));
  const std::vector<ag::Var> zero{ag::constant(Tensor({2, 2, 2}))};
  CHECK(acfd::orthogonality_loss(zero, op).value()[0] == 0.0);

  Rng rng(10);
  for (int trial = 0; trial < 10; ++trial) {
    std::vector<ag::Var> s, p;
    std::vector<Tensor> st, pt;
    for (int b = 0; b < 3; ++b) {
      st.push_back(random_tensor({4, 3, 3}, rng));
      pt.push_back(random_tensor({4, 3, 3}, rng));
      s.emplace_back(st.back(), true);
      p.emplace_back(pt.back(), true);
    }
    const ag::Var loss = acfd::orthogonality_loss(s, p);
    CHECK(loss.value()[0] >= 0.0);
    CHECK(loss.value()[0] == doctest::Approx(oracle::orthogonality(st, pt)).epsilon(1e-6));
    ag::backward(loss);
    CHECK(s[0].grad().all_finite());
  }
}

TEST_CASE("cross-correlation statistic") {
  Tensor s({1, 2, 2}, {1, 2, 3, 4});
  Tensor p({2, 2, 2}, {2, 4, 6, 8, 4, 3, 2, 1});
  CHECK(acfd::mean_abs_cross_correlation(s, p) == doctest::Approx(1.0));
  Tensor flat({1, 2, 2}, 3.0);
  CHECK(acfd::mean_abs_cross_correlation(flat, p) == 0.0);
}
