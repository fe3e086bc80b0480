#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "dcdnet/tensor.hpp"

// Procedural cross-domain few-shot segmentation data: parametric shapes on
// textured backgrounds, with per-domain palette, texture and intensity curve.
namespace dcdnet::data {

using Rgb = std::array<double, 3>;

// 3 x H x W, values in [0, 1].
struct ImageGrid {
  Tensor pixels;

  int height() const { return pixels.dim(1); }
  int width() const { return pixels.dim(2); }
  double mean() const;
};

// H x W binary labels (1 = the episode's foreground class).
struct MaskGrid {
  int height = 0;
  int width = 0;
  std::vector<std::uint8_t> labels;

  MaskGrid() = default;
  MaskGrid(int h, int w) : height(h), width(w), labels(static_cast<std::size_t>(h) * w, 0) {}

  std::uint8_t at(int y, int x) const { return labels[static_cast<std::size_t>(y) * width + x]; }
  std::uint8_t& at(int y, int x) { return labels[static_cast<std::size_t>(y) * width + x]; }
  std::size_t foreground_count() const;
  double foreground_fraction() const;
  Tensor as_tensor() const;  // [H,W] of 0/1 doubles
  friend bool operator==(const MaskGrid&, const MaskGrid&) = default;
};

// Area-average to h x w, then re-binarise at 0.5. Returns [h,w] of 0/1.
Tensor downsample_mask(const MaskGrid& mask, int h, int w);

struct SupportPair {
  ImageGrid image;
  MaskGrid mask;
};

struct Episode {
  std::vector<SupportPair> support;
  ImageGrid query_image;
  MaskGrid query_mask;
  int class_id = -1;
  int domain_id = -1;
};

struct TextureParams {
  double noise_amplitude = 0.05;
  double frequency = 8.0;  // value-noise cells across the image
};

// y = clamp(gain * x^gamma + offset, 0, 1), monotone for gain > 0.
struct IntensityTransform {
  double gamma = 1.0;
  double gain = 1.0;
  double offset = 0.0;
  double apply(double x) const;
};

struct DomainSpec {
  int domain_id = 0;
  int image_size = 64;
  TextureParams texture;
  std::map<int, Rgb> palette;  // class id -> foreground base colour
  Rgb background_a{0.5, 0.5, 0.5};
  Rgb background_b{0.4, 0.4, 0.4};
  IntensityTransform intensity;
  std::vector<int> class_set;
  double distractor_probability = 0.5;

  bool owns(int class_id) const;
};

struct BenchmarkConfig {
  int image_size = 64;
  int source_classes = 12;
  int target_domains = 3;
  int classes_per_target = 4;
};

// Domain 0 is the source; domains 1..target_domains are targets with
// label spaces disjoint from the source and from each other.
std::vector<DomainSpec> make_benchmark(const BenchmarkConfig& cfg = {});

// Shape family index (0..7) used for a class id.
int shape_family(int class_id);

struct Scene {
  ImageGrid image;
  MaskGrid mask;
};

Scene generate_scene(std::uint64_t rng_seed, const DomainSpec& domain, int class_id);

Episode sample_episode(std::uint64_t rng_seed, const DomainSpec& domain, int k_shots);

// Geometric (flips, 90-degree rotations) and photometric (brightness, hue)
// support augmentation.
struct AugmentDraw {
  bool hflip = false;
  bool vflip = false;
  int rot90 = 0;            // counter-clockwise quarter turns
  double brightness = 0.0;  // additive
  double hue = 0.0;         // rotation about the grey axis, radians

  bool geometric_only() const { return brightness == 0.0 && hue == 0.0; }
};

AugmentDraw draw_augmentation(std::uint64_t rng_seed);
std::pair<ImageGrid, MaskGrid> apply_augmentation(const ImageGrid& image, const MaskGrid& mask,
                                                  const AugmentDraw& draw);
std::pair<ImageGrid, MaskGrid> augment_support(const ImageGrid& image, const MaskGrid& mask,
                                               std::uint64_t rng_seed);

// Strong photometric and texture perturbation standing in for unseen-domain
// appearance during adversarial training.
ImageGrid synthesize_pseudo_target(const ImageGrid& image, std::uint64_t rng_seed);

// Source of episodes for one domain, either generated live or read back
// from an exported directory.
class EpisodeSource {
 public:
  virtual ~EpisodeSource() = default;
  virtual const DomainSpec& domain() const = 0;
  virtual Episode episode(std::uint64_t rng_seed, int k_shots) const = 0;
};

class LiveSource : public EpisodeSource {
 public:
  explicit LiveSource(DomainSpec domain) : domain_(std::move(domain)) {}
  const DomainSpec& domain() const override { return domain_; }
  Episode episode(std::uint64_t rng_seed, int k_shots) const override {
    return sample_episode(rng_seed, domain_, k_shots);
  }

 private:
  DomainSpec domain_;
};

struct StoredScene {
  std::uint64_t seed = 0;
  int class_id = -1;
  Scene scene;
};

// Scenes loaded from an export directory; episodes draw K+1 distinct scenes
// of one class.
class ExportedSource : public EpisodeSource {
 public:
  ExportedSource(DomainSpec domain, std::vector<StoredScene> scenes);
  const DomainSpec& domain() const override { return domain_; }
  Episode episode(std::uint64_t rng_seed, int k_shots) const override;
  const std::vector<StoredScene>& scenes() const { return scenes_; }

 private:
  DomainSpec domain_;
  std::vector<StoredScene> scenes_;
  std::map<int, std::vector<std::size_t>> by_class_;
};

// Writes `scenes_per_class` scenes per class to dir/domain_<id>/ with a
// manifest (seed class_id image mask) and PPM/PGM files.
std::filesystem::path export_domain(const DomainSpec& domain, const std::filesystem::path& root,
                                    int scenes_per_class, std::uint64_t seed);
ExportedSource load_exported_domain(const DomainSpec& domain, const std::filesystem::path& dir);

}  // namespace dcdnet::data
