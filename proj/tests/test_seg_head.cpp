#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "dcdnet/seg_head.hpp"
#include "helpers.hpp"

using namespace dcdnet;
using namespace dcdnet::seg;
using testutil::random_tensor;

namespace {

data::MaskGrid half_mask(int n, bool left) {
  data::MaskGrid m(n, n);
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) m.at(y, x) = left ? (x < n / 2) : (y < n / 2);
  }
  return m;
}

double norm(const Tensor& t) {
  double s = 0;
  for (double v : t.storage()) s += v * v;
  return std::sqrt(s);
}

// Features whose foreground columns point one way and background another,
// plus noise, on an 8x8 grid for a 32x32 image.
Tensor separable_feature(const data::MaskGrid& mask, Rng& rng, double noise = 0.3) {
  Tensor f({6, 8, 8});
  const Tensor lo = downsample_mask(mask, 8, 8);
  for (int y = 0; y < 8; ++y) {
    for (int x = 0; x < 8; ++x) {
      const bool fg = lo[static_cast<std::size_t>(y * 8 + x)] > 0.5;
      for (int c = 0; c < 6; ++c) f.at(c, y, x) = (fg ? (c < 3) : (c >= 3)) + rng.normal(0, noise);
    }
  }
  return f;
}

double iou_fg(const data::MaskGrid& a, const data::MaskGrid& b) {
  IouCounts c;
  c.add(a, b);
  return c.fg_iou();
}

}  // namespace

TEST_CASE("masked average pooling") {
  ag::NoGradGuard g;
  SUBCASE("constant features give the normalized constant") {
    Tensor f({3, 4, 4});
    for (int c = 0; c < 3; ++c) {
      for (int i = 0; i < 16; ++i) f[static_cast<std::size_t>(c * 16 + i)] = c + 1.0;
    }
    const Tensor p = masked_average_pool(ag::constant(f), half_mask(16, true)).value();
    const double n = std::sqrt(1.0 + 4 + 9);
    CHECK(p[0] == doctest::Approx(1 / n));
    CHECK(p[2] == doctest::Approx(3 / n));
  }
  SUBCASE("full and empty masks fall back to the global average") {
    Rng rng(1);
    const ag::Var f = ag::constant(random_tensor({3, 4, 4}, rng));
    data::MaskGrid full(16, 16);
    std::fill(full.labels.begin(), full.labels.end(), 1);
    const Tensor gap = ag::normalize0(ag::reshape(ag::spatial_mean(f), {3})).value();
    const Tensor a = masked_average_pool(f, full).value();
    const Tensor b = masked_average_pool(f, data::MaskGrid(16, 16)).value();
    for (int i = 0; i < 3; ++i) {
      CHECK(a[static_cast<std::size_t>(i)] == doctest::Approx(gap[static_cast<std::size_t>(i)]));
      CHECK(b[static_cast<std::size_t>(i)] == doctest::Approx(gap[static_cast<std::size_t>(i)]));
    }
  }
  SUBCASE("single-pixel mask on a 2x2 map picks that column") {
    // Columns (1,0), (0,2), (3,4), (-1,-1); the mask selects pixel (1,0).
    const Tensor f({2, 2, 2}, {1, 0, 3, -1, 0, 2, 4, -1});
    data::MaskGrid m(2, 2);
    m.at(1, 0) = 1;
    const Tensor p = masked_average_pool(ag::constant(f), m).value();
    CHECK(p[0] == doctest::Approx(0.6));
    CHECK(p[1] == doctest::Approx(0.8));
  }
}

TEST_CASE("prototype scores") {
  ag::NoGradGuard g;
  Rng rng(2);
  const ag::Var q = ag::constant(random_tensor({4, 3, 3}, rng));
  SUBCASE("equal prototypes score one half") {
    const ag::Var v = ag::normalize0(ag::constant(random_tensor({4}, rng)));
    const Tensor score = prototype_score(q, {v, v}, 0.1).value();
    for (double s : score.storage()) CHECK(s == doctest::Approx(0.5));
  }
  SUBCASE("scores are invariant to feature scale") {
    const Prototype p{ag::normalize0(ag::constant(random_tensor({4}, rng))),
                      ag::normalize0(ag::constant(random_tensor({4}, rng)))};
    const Tensor a = prototype_score(q, p, 0.1).value();
    const Tensor b = prototype_score(ag::mul_scalar(q, 7.5), p, 0.1).value();
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
  }
}

TEST_CASE("training head on a copied support feature") {
  ag::NoGradGuard g;
  Rng rng(3);
  const data::MaskGrid mask = half_mask(32, true);
  const ag::Var f = ag::constant(separable_feature(mask, rng));
  const std::vector<ag::Var> feats{f};
  const std::vector<data::MaskGrid> masks{mask};
  const HeadConfig cfg;
  const HeadOutput out = ssp_predict(feats, masks, f, 32, cfg);
  CHECK(out.score.shape() == Shape{1, 32, 32});
  for (double v : out.score.value().storage()) CHECK((v >= 0 && v <= 1));
  CHECK(iou_fg(to_prediction(out.initial_score.value()).mask, mask) >= 0.9);

  SUBCASE("five identical supports act like one") {
    const std::vector<ag::Var> five(5, f);
    const std::vector<data::MaskGrid> five_masks(5, mask);
    const Tensor a = ssp_predict(five, five_masks, f, 32, cfg).score.value();
    const Tensor b = out.score.value();
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-10));
  }
  SUBCASE("scale of the features does not change the mask") {
    const std::vector<ag::Var> scaled{ag::mul_scalar(f, 3.0)};
    const Prediction a = to_prediction(ssp_predict(scaled, masks, ag::mul_scalar(f, 3.0), 32, cfg).score.value());
    CHECK(a.mask == to_prediction(out.score.value()).mask);
  }
}

TEST_CASE("refinement head") {
  ag::NoGradGuard g;
  Rng rng(4);
  const data::MaskGrid mask = half_mask(32, false);
  const ag::Var sup = ag::constant(separable_feature(mask, rng, 0.5));
  const ag::Var query = ag::constant(separable_feature(mask, rng, 0.5));
  const std::vector<ag::Var> feats{sup};
  const std::vector<data::MaskGrid> masks{mask};
  HeadConfig cfg;

  const HeadOutput out = bfp_predict(feats, masks, query, 32, cfg);
  CHECK(out.rounds == 3);
  const double initial = iou_fg(to_prediction(out.initial_score.value()).mask, mask);
  const double final_iou = iou_fg(to_prediction(out.score.value()).mask, mask);
  CHECK(final_iou >= initial);

  SUBCASE("without refinement it is single prototype matching") {
    HeadConfig plain = cfg;
    plain.query_refine = false;
    plain.bfp_rounds = 1;
    const Tensor a = bfp_predict(feats, masks, query, 32, plain).score.value();
    const Prototype p = support_prototype(feats, masks);
    const Tensor b = ag::resize_bilinear(prototype_score(query, p, cfg.temperature), 32, 32).value();
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
  }
  SUBCASE("more rounds past a fixed point change nothing") {
    HeadConfig many = cfg;
    many.bfp_rounds = 8;
    HeadConfig more = cfg;
    more.bfp_rounds = 9;
    const Prediction a = to_prediction(bfp_predict(feats, masks, query, 32, many).score.value());
    const Prediction b = to_prediction(bfp_predict(feats, masks, query, 32, more).score.value());
    CHECK(a.mask == b.mask);
  }
}

TEST_CASE("mIoU") {
  const data::MaskGrid left = half_mask(8, true), top = half_mask(8, false);
  data::MaskGrid inverse = left;
  for (auto& v : inverse.labels) v = 1 - v;
  auto pred = [](const data::MaskGrid& m) {
    Prediction p;
    p.mask = m;
    return p;
  };
  SUBCASE("perfect, complement and half-square cases") {
    const std::vector<data::MaskGrid> gt{left};
    CHECK(miou(std::vector<Prediction>{pred(left)}, gt) == doctest::Approx(1.0));
    CHECK(miou(std::vector<Prediction>{pred(inverse)}, gt) == doctest::Approx(0.0));
    IouCounts c;
    c.add(top, left);
    CHECK(c.fg_iou() == doctest::Approx(1.0 / 3));
    CHECK(c.bg_iou() == doctest::Approx(1.0 / 3));
    CHECK(miou(std::vector<Prediction>{pred(top)}, gt) == doctest::Approx(1.0 / 3));
  }
  SUBCASE("empty unions count as one") {
    IouCounts c;
    c.add(data::MaskGrid(4, 4), data::MaskGrid(4, 4));
    CHECK(c.fg_iou() == 1.0);
    CHECK(c.miou() == 1.0);
  }
  SUBCASE("order of episodes does not matter and the value stays in range") {
    const std::vector<Prediction> p{pred(top), pred(left), pred(inverse)};
    const std::vector<data::MaskGrid> gt{left, left, top};
    const std::vector<Prediction> pr{pred(inverse), pred(top), pred(left)};
    const std::vector<data::MaskGrid> gtr{top, left, left};
    const double a = miou(p, gt), b = miou(pr, gtr);
    CHECK(a == doctest::Approx(b));
    CHECK(a >= 0.0);
    CHECK(a <= 1.0);
    CHECK(miou(p, gt, true) <= 1.0);
  }
}
