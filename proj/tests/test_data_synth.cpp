#include <doctest.h>

#include <filesystem>
#include <set>

#include "dcdnet/data_synth.hpp"
#include "dcdnet/errors.hpp"

using namespace dcdnet;
using namespace dcdnet::data;

TEST_CASE("benchmark label spaces are disjoint") {
  const auto specs = make_benchmark();
  REQUIRE(specs.size() == 4);
  CHECK(specs[0].class_set.size() == 12);
  for (std::size_t a = 0; a < specs.size(); ++a) {
    for (std::size_t b = a + 1; b < specs.size(); ++b) {
      for (int c : specs[a].class_set) CHECK_FALSE(specs[b].owns(c));
    }
  }
  for (std::size_t d = 1; d < specs.size(); ++d) CHECK(specs[d].class_set.size() == 4);
}

TEST_CASE("scenes are deterministic and keep foreground in range") {
  const auto specs = make_benchmark();
  const Scene a = generate_scene(7, specs[0], 3);
  const Scene b = generate_scene(7, specs[0], 3);
  CHECK(a.image.pixels == b.image.pixels);
  CHECK(a.mask == b.mask);
  for (const DomainSpec& spec : specs) {
    for (int c : spec.class_set) {
      for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const double f = generate_scene(seed, spec, c).mask.foreground_fraction();
        CHECK(f >= 0.05);
        CHECK(f <= 0.60);
      }
    }
  }
}

TEST_CASE("a class outside the domain is rejected") {
  const auto specs = make_benchmark();
  CHECK_THROWS_AS(generate_scene(1, specs[1], specs[0].class_set.front()), InvalidClassError);
}

TEST_CASE("the same class rendered in another domain keeps the mask and changes the pixels") {
  const auto specs = make_benchmark();
  DomainSpec other = specs[1];
  other.class_set = {3};
  other.palette[3] = specs[1].palette.begin()->second;
  for (std::uint64_t seed : {7ULL, 11ULL, 42ULL}) {
    const Scene src = generate_scene(seed, specs[0], 3);
    const Scene tgt = generate_scene(seed, other, 3);
    CHECK(src.mask == tgt.mask);
    CHECK(std::abs(src.image.mean() - tgt.image.mean()) > 0.01);
  }
}

TEST_CASE("episodes share a class and use distinct supports") {
  const auto specs = make_benchmark();
  const Episode one = sample_episode(5, specs[2], 1);
  CHECK(one.support.size() == 1);
  const Episode five = sample_episode(5, specs[2], 5);
  REQUIRE(five.support.size() == 5);
  for (std::size_t i = 0; i < 5; ++i) {
    for (std::size_t j = i + 1; j < 5; ++j) CHECK_FALSE(five.support[i].image.pixels == five.support[j].image.pixels);
  }
  const Episode again = sample_episode(5, specs[2], 5);
  CHECK(again.query_image.pixels == five.query_image.pixels);
  CHECK(again.class_id == five.class_id);
  CHECK(specs[2].owns(five.class_id));
}

TEST_CASE("augmentation keeps image and mask aligned") {
  const auto specs = make_benchmark();
  const Scene s = generate_scene(9, specs[0], 1);
  const int w = s.mask.width;

  SUBCASE("identity draw returns the input") {
    const auto [img, mask] = apply_augmentation(s.image, s.mask, AugmentDraw{});
    CHECK(img.pixels == s.image.pixels);
    CHECK(mask == s.mask);
  }
  SUBCASE("horizontal flip mirrors the mask") {
    AugmentDraw d;
    d.hflip = true;
    const auto [img, mask] = apply_augmentation(s.image, s.mask, d);
    for (int y = 0; y < s.mask.height; ++y) {
      for (int x = 0; x < w; ++x) CHECK(mask.at(y, x) == s.mask.at(y, w - 1 - x));
    }
    CHECK(img.pixels.at(0, 0, 0) == s.image.pixels.at(0, 0, w - 1));
  }
  SUBCASE("flip then mask equals mask then flip for every geometric draw") {
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
      AugmentDraw d = draw_augmentation(seed);
      d.brightness = d.hue = 0;
      const auto [img, mask] = apply_augmentation(s.image, s.mask, d);
      CHECK(mask.foreground_count() == s.mask.foreground_count());
      // A mask rendered as an image goes through the same geometry.
      ImageGrid as_image{Tensor({3, s.mask.height, w})};
      for (int c = 0; c < 3; ++c) {
        for (int y = 0; y < s.mask.height; ++y) {
          for (int x = 0; x < w; ++x) as_image.pixels.at(c, y, x) = s.mask.at(y, x);
        }
      }
      const auto [mi, unused] = apply_augmentation(as_image, s.mask, d);
      for (int y = 0; y < s.mask.height; ++y) {
        for (int x = 0; x < w; ++x) CHECK(mi.pixels.at(0, y, x) == mask.at(y, x));
      }
    }
  }
  SUBCASE("photometric draws leave the mask alone and keep it binary") {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto [img, mask] = augment_support(s.image, s.mask, seed);
      for (auto v : mask.labels) CHECK((v == 0 || v == 1));
      for (double v : img.pixels.storage()) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
      }
    }
  }
}

TEST_CASE("downsample_mask area-averages then re-binarises") {
  MaskGrid m(4, 4);
  m.at(0, 0) = m.at(0, 1) = m.at(1, 0) = 1;  // 3 of 4 in the top-left cell
  m.at(2, 2) = 1;                             // 1 of 4 in the bottom-right cell
  const Tensor d = downsample_mask(m, 2, 2);
  CHECK(d[0] == 1.0);
  CHECK(d[1] == 0.0);
  CHECK(d[3] == 0.0);
  CHECK_THROWS_AS(downsample_mask(m, 3, 3), ShapeError);
}

TEST_CASE("exported scenes read back identically") {
  const auto specs = make_benchmark();
  const auto root = std::filesystem::temp_directory_path() / "dcdnet_export_test";
  std::filesystem::remove_all(root);
  const auto dir = export_domain(specs[1], root, 3, 17);
  const ExportedSource src = load_exported_domain(specs[1], dir);
  REQUIRE(src.scenes().size() == 3 * specs[1].class_set.size());
  const StoredScene& first = src.scenes().front();
  const Scene fresh = generate_scene(first.seed, specs[1], first.class_id);
  CHECK(first.scene.mask == fresh.mask);
  const Episode ep = src.episode(3, 2);
  CHECK(ep.support.size() == 2);
  CHECK_THROWS_AS(load_exported_domain(specs[2], root / "missing"), MissingArtifact);
  std::filesystem::remove_all(root);
}
