#include "dcdnet/data_synth.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <sstream>

#include "dcdnet/errors.hpp"
#include "dcdnet/image_io.hpp"
#include "dcdnet/rng.hpp"

namespace dcdnet::data {

namespace {

constexpr double kPi = std::numbers::pi;
constexpr std::uint64_t kMaskStream = 0x6d61736bULL;
constexpr std::uint64_t kLookStream = 0x6c6f6f6bULL;
constexpr std::uint64_t kDistractorStream = 0x64697374ULL;

Rgb hsv(double h, double s, double v) {
  h = h - std::floor(h);
  const double c = v * s;
  const double hp = h * 6.0;
  const double x = c * (1 - std::abs(std::fmod(hp, 2.0) - 1));
  Rgb rgb{0, 0, 0};
  if (hp < 1) rgb = {c, x, 0};
  else if (hp < 2) rgb = {x, c, 0};
  else if (hp < 3) rgb = {0, c, x};
  else if (hp < 4) rgb = {0, x, c};
  else if (hp < 5) rgb = {x, 0, c};
  else rgb = {c, 0, x};
  const double m = v - c;
  return {rgb[0] + m, rgb[1] + m, rgb[2] + m};
}

// Smooth lattice noise in [-1, 1].
class ValueNoise {
 public:
  ValueNoise(std::uint64_t seed, double cells) : cells_(std::max(1, static_cast<int>(std::lround(cells)))) {
    Rng rng(seed);
    lattice_.resize(static_cast<std::size_t>(cells_ + 1) * (cells_ + 1));
    for (double& v : lattice_) v = rng.uniform(-1.0, 1.0);
  }

  // u, v in [0, 1].
  double at(double u, double v) const {
    const double fx = u * cells_, fy = v * cells_;
    const int x0 = std::min(static_cast<int>(fx), cells_ - 1);
    const int y0 = std::min(static_cast<int>(fy), cells_ - 1);
    const double tx = smooth(fx - x0), ty = smooth(fy - y0);
    auto l = [&](int x, int y) { return lattice_[static_cast<std::size_t>(y) * (cells_ + 1) + x]; };
    const double top = l(x0, y0) * (1 - tx) + l(x0 + 1, y0) * tx;
    const double bot = l(x0, y0 + 1) * (1 - tx) + l(x0 + 1, y0 + 1) * tx;
    return top * (1 - ty) + bot * ty;
  }

 private:
  static double smooth(double t) { return t * t * (3 - 2 * t); }
  int cells_;
  std::vector<double> lattice_;
};

// Per-class shape constants; instances add pose and scale.
struct ShapeClass {
  int family = 0;
  double p1 = 0, p2 = 0;
  std::array<double, 3> harmonic_amp{};
  std::array<double, 3> harmonic_phase{};
};

ShapeClass shape_class(int class_id) {
  ShapeClass s;
  s.family = shape_family(class_id);
  const int variant = (class_id / 8) % 3;
  switch (s.family) {
    case 0: s.p1 = std::array{0.55, 0.8, 0.4}[variant]; break;    // ellipse aspect
    case 1: s.p1 = std::array{0.55, 0.85, 0.35}[variant]; break;  // rectangle aspect
    case 2: s.p1 = std::array{3, 5, 6}[variant]; break;           // polygon sides
    case 3: s.p1 = std::array{0.5, 0.65, 0.35}[variant]; break;   // ring inner radius
    case 4: s.p1 = std::array{5, 4, 6}[variant]; s.p2 = 0.45; break;  // star points, core
    case 5: s.p1 = std::array{0.3, 0.42, 0.22}[variant]; break;   // cross half width
    case 6: s.p1 = std::array{0.5, 0.65, 0.38}[variant]; break;   // crescent offset
    default: {
      Rng rng(derive_seed(0xb10bULL, {static_cast<std::uint64_t>(class_id)}));
      for (int k = 0; k < 3; ++k) {
        s.harmonic_amp[k] = rng.uniform(0.08, 0.22);
        s.harmonic_phase[k] = rng.uniform(0, 2 * kPi);
      }
    }
  }
  return s;
}

bool inside_shape(const ShapeClass& s, double u, double v) {
  const double r = std::hypot(u, v);
  const double th = std::atan2(v, u);
  switch (s.family) {
    case 0: return u * u + (v / s.p1) * (v / s.p1) <= 1.0;
    case 1: return std::abs(u) <= 0.9 && std::abs(v) <= 0.9 * s.p1;
    case 2: {
      const int n = static_cast<int>(s.p1);
      const double sector = 2 * kPi / n;
      const double a = std::fmod(th + 2 * kPi, sector) - sector / 2;
      return r * std::cos(a) <= std::cos(kPi / n);
    }
    case 3: return r <= 1.0 && r >= s.p1;
    case 4: {
      const double n = s.p1;
      const double lobe = std::pow(std::abs(std::cos(n * th / 2)), 2.0);
      return r <= s.p2 + (1 - s.p2) * lobe;
    }
    case 5: return (std::abs(u) <= s.p1 && std::abs(v) <= 1) || (std::abs(v) <= s.p1 && std::abs(u) <= 1);
    case 6: {
      const double du = u - s.p1;
      return r <= 1.0 && std::hypot(du, v) > 0.8;
    }
    default: {
      double bound = 0.85;
      for (int k = 0; k < 3; ++k) bound += s.harmonic_amp[k] * std::cos((k + 2) * th + s.harmonic_phase[k]);
      return r <= bound;
    }
  }
}

struct Pose {
  double cx, cy, radius, angle;
};

Pose draw_pose(Rng& rng, int size) {
  return {rng.uniform(0.32, 0.68) * size, rng.uniform(0.32, 0.68) * size, rng.uniform(0.2, 0.33) * size,
          rng.uniform(0, 2 * kPi)};
}

MaskGrid rasterize(const ShapeClass& s, const Pose& p, int size) {
  MaskGrid m(size, size);
  const double c = std::cos(p.angle), sn = std::sin(p.angle);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double dx = x + 0.5 - p.cx, dy = y + 0.5 - p.cy;
      const double u = (dx * c + dy * sn) / p.radius;
      const double v = (-dx * sn + dy * c) / p.radius;
      m.at(y, x) = inside_shape(s, u, v) ? 1 : 0;
    }
  }
  return m;
}

// Keeps the foreground fraction inside [0.05, 0.60] by rescaling the pose.
MaskGrid rasterize_bounded(const ShapeClass& s, Rng& rng, int size) {
  for (int attempt = 0; attempt < 64; ++attempt) {
    Pose pose = draw_pose(rng, size);
    for (int fit = 0; fit < 6; ++fit) {
      MaskGrid m = rasterize(s, pose, size);
      const double f = m.foreground_fraction();
      if (f >= 0.06 && f <= 0.55) return m;
      if (f <= 0) break;
      pose.radius *= std::sqrt(std::clamp(f, 0.06, 0.55) / f);
    }
  }
  throw std::logic_error("scene mask could not satisfy the foreground bounds");
}

Rgb jitter(const Rgb& c, double amount, Rng& rng) {
  return {std::clamp(c[0] + rng.uniform(-amount, amount), 0.0, 1.0),
          std::clamp(c[1] + rng.uniform(-amount, amount), 0.0, 1.0),
          std::clamp(c[2] + rng.uniform(-amount, amount), 0.0, 1.0)};
}

DomainSpec make_domain(int domain_id, const BenchmarkConfig& cfg, std::vector<int> classes) {
  DomainSpec d;
  d.domain_id = domain_id;
  d.image_size = cfg.image_size;
  d.class_set = std::move(classes);
  const int n = static_cast<int>(d.class_set.size());
  switch (domain_id) {
    case 0:  // saturated objects on mid-grey clutter
      d.texture = {0.06, 6.0};
      d.background_a = {0.46, 0.46, 0.44};
      d.background_b = {0.32, 0.34, 0.36};
      d.intensity = {1.0, 1.0, 0.0};
      for (int i = 0; i < n; ++i) d.palette[d.class_set[i]] = hsv(i / static_cast<double>(n) + 0.03, 0.75, 0.85);
      break;
    case 1:  // muted earth tones, fine grain
      d.texture = {0.14, 18.0};
      d.background_a = {0.30, 0.36, 0.22};
      d.background_b = {0.42, 0.38, 0.26};
      d.intensity = {0.9, 1.0, 0.0};
      for (int i = 0; i < n; ++i) d.palette[d.class_set[i]] = hsv(0.02 + 0.1 * i, 0.55, 0.5 + 0.12 * i);
      break;
    case 2:  // warm near-skin palette, smooth shading
      d.texture = {0.08, 3.0};
      d.background_a = {0.86, 0.70, 0.60};
      d.background_b = {0.78, 0.62, 0.52};
      d.intensity = {1.3, 0.95, 0.02};
      for (int i = 0; i < n; ++i) d.palette[d.class_set[i]] = hsv(0.97 + 0.03 * i, 0.45 + 0.1 * i, 0.25 + 0.12 * i);
      break;
    default:  // grayscale, dark background, strong curve
      d.texture = {0.09, 10.0};
      d.background_a = {0.14, 0.14, 0.14};
      d.background_b = {0.22, 0.22, 0.22};
      d.intensity = {1.6, 1.0, 0.05};
      for (int i = 0; i < n; ++i) {
        const double g = 0.55 + 0.12 * i;
        d.palette[d.class_set[i]] = {g, g, g * 0.97};
      }
      break;
  }
  return d;
}

void render_shape(Tensor& px, const MaskGrid& m, const Rgb& colour, const ValueNoise& tex, double amp) {
  const int size = m.height;
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      if (!m.at(y, x)) continue;
      const double t = 1.0 + amp * tex.at((x + 0.5) / size, (y + 0.5) / size);
      for (int c = 0; c < 3; ++c) px.at(c, y, x) = colour[c] * t;
    }
  }
}

}  // namespace

double ImageGrid::mean() const { return pixels.sum() / static_cast<double>(pixels.size()); }

std::size_t MaskGrid::foreground_count() const {
  return static_cast<std::size_t>(std::count(labels.begin(), labels.end(), std::uint8_t{1}));
}

double MaskGrid::foreground_fraction() const {
  return labels.empty() ? 0.0 : static_cast<double>(foreground_count()) / static_cast<double>(labels.size());
}

Tensor MaskGrid::as_tensor() const {
  Tensor t({height, width});
  for (std::size_t i = 0; i < labels.size(); ++i) t[i] = labels[i];
  return t;
}

Tensor downsample_mask(const MaskGrid& mask, int h, int w) {
  if (h <= 0 || w <= 0 || mask.height % h != 0 || mask.width % w != 0) {
    throw ShapeError("downsample_mask: " + std::to_string(mask.height) + "x" + std::to_string(mask.width) +
                     " is not an integer multiple of " + std::to_string(h) + "x" + std::to_string(w));
  }
  const int fy = mask.height / h, fx = mask.width / w;
  Tensor out({h, w});
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      int count = 0;
      for (int dy = 0; dy < fy; ++dy) {
        for (int dx = 0; dx < fx; ++dx) count += mask.at(y * fy + dy, x * fx + dx);
      }
      out[static_cast<std::size_t>(y) * w + x] = (2 * count >= fy * fx) ? 1.0 : 0.0;
    }
  }
  return out;
}

double IntensityTransform::apply(double x) const {
  return std::clamp(gain * std::pow(std::clamp(x, 0.0, 1.0), gamma) + offset, 0.0, 1.0);
}

bool DomainSpec::owns(int class_id) const {
  return std::find(class_set.begin(), class_set.end(), class_id) != class_set.end();
}

std::vector<DomainSpec> make_benchmark(const BenchmarkConfig& cfg) {
  std::vector<DomainSpec> domains;
  std::vector<int> source(cfg.source_classes);
  std::iota(source.begin(), source.end(), 0);
  domains.push_back(make_domain(0, cfg, source));
  int next = cfg.source_classes;
  for (int d = 1; d <= cfg.target_domains; ++d) {
    std::vector<int> cls(cfg.classes_per_target);
    std::iota(cls.begin(), cls.end(), next);
    next += cfg.classes_per_target;
    domains.push_back(make_domain(d, cfg, cls));
  }
  return domains;
}

int shape_family(int class_id) { return ((class_id % 8) + 8) % 8; }

Scene generate_scene(std::uint64_t rng_seed, const DomainSpec& domain, int class_id) {
  if (!domain.owns(class_id)) {
    throw InvalidClassError("class " + std::to_string(class_id) + " is not in domain " +
                            std::to_string(domain.domain_id));
  }
  const int size = domain.image_size;
  const auto cls = static_cast<std::uint64_t>(class_id);
  // Geometry depends only on (seed, class); appearance on (seed, domain).
  Rng mask_rng(derive_seed(rng_seed, {kMaskStream, cls}));
  Rng look_rng(derive_seed(rng_seed, {kLookStream, static_cast<std::uint64_t>(domain.domain_id), cls}));
  Rng distractor_rng(derive_seed(rng_seed, {kDistractorStream, cls}));

  Scene scene;
  scene.mask = rasterize_bounded(shape_class(class_id), mask_rng, size);

  Tensor px({3, size, size});
  const double dir = look_rng.uniform(0, 2 * kPi);
  const ValueNoise bg_noise(look_rng.engine()(), domain.texture.frequency);
  for (int y = 0; y < size; ++y) {
    for (int x = 0; x < size; ++x) {
      const double u = (x + 0.5) / size, v = (y + 0.5) / size;
      const double t = std::clamp(0.5 + (u - 0.5) * std::cos(dir) + (v - 0.5) * std::sin(dir), 0.0, 1.0);
      const double n = domain.texture.noise_amplitude * bg_noise.at(u, v);
      for (int c = 0; c < 3; ++c) px.at(c, y, x) = domain.background_a[c] * (1 - t) + domain.background_b[c] * t + n;
    }
  }

  std::vector<int> others;
  for (int c : domain.class_set) {
    if (c != class_id) others.push_back(c);
  }
  const bool add_distractor = !others.empty() && look_rng.bernoulli(domain.distractor_probability);
  if (add_distractor) {
    const int other = others[look_rng.uniform_int(0, static_cast<int>(others.size()) - 1)];
    Pose pose = draw_pose(distractor_rng, size);
    pose.radius *= 0.6;
    pose.cx = distractor_rng.uniform(0.15, 0.85) * size;
    pose.cy = distractor_rng.uniform(0.15, 0.85) * size;
    const MaskGrid dm = rasterize(shape_class(other), pose, size);
    const ValueNoise dtex(look_rng.engine()(), domain.texture.frequency);
    render_shape(px, dm, jitter(domain.palette.at(other), 0.04, look_rng), dtex, domain.texture.noise_amplitude);
  }

  const ValueNoise fg_noise(look_rng.engine()(), domain.texture.frequency * 0.5);
  render_shape(px, scene.mask, jitter(domain.palette.at(class_id), 0.05, look_rng), fg_noise,
               1.5 * domain.texture.noise_amplitude);

  for (double& val : px.values()) val = domain.intensity.apply(val);
  scene.image.pixels = std::move(px);
  return scene;
}

Episode sample_episode(std::uint64_t rng_seed, const DomainSpec& domain, int k_shots) {
  if (k_shots < 1) throw std::invalid_argument("k_shots must be >= 1");
  if (domain.class_set.empty()) throw InvalidClassError("domain has no classes");
  Rng rng(derive_seed(rng_seed, {0x6570ULL, static_cast<std::uint64_t>(domain.domain_id)}));
  Episode ep;
  ep.domain_id = domain.domain_id;
  ep.class_id = domain.class_set[rng.uniform_int(0, static_cast<int>(domain.class_set.size()) - 1)];
  for (int k = 0; k < k_shots; ++k) {
    Scene s = generate_scene(derive_seed(rng_seed, {0x73ULL, static_cast<std::uint64_t>(k)}), domain, ep.class_id);
    ep.support.push_back({std::move(s.image), std::move(s.mask)});
  }
  Scene q = generate_scene(derive_seed(rng_seed, {0x71ULL}), domain, ep.class_id);
  ep.query_image = std::move(q.image);
  ep.query_mask = std::move(q.mask);
  return ep;
}

AugmentDraw draw_augmentation(std::uint64_t rng_seed) {
  Rng rng(derive_seed(rng_seed, {0x617567ULL}));
  AugmentDraw d;
  d.hflip = rng.bernoulli(0.5);
  d.vflip = rng.bernoulli(0.5);
  d.rot90 = rng.uniform_int(0, 3);
  d.brightness = rng.uniform(-0.1, 0.1);
  d.hue = rng.uniform(-0.15, 0.15);
  return d;
}

std::pair<ImageGrid, MaskGrid> apply_augmentation(const ImageGrid& image, const MaskGrid& mask,
                                                  const AugmentDraw& draw) {
  const int h = image.height(), w = image.width();
  if (mask.height != h || mask.width != w) throw ShapeError("augment: image/mask size mismatch");
  if (draw.rot90 % 2 != 0 && h != w) throw ShapeError("augment: rotation needs a square image");
  // Source coordinate of every output pixel after flips then rotation.
  auto source = [&](int y, int x) {
    int sy = y, sx = x;
    for (int r = 0; r < ((draw.rot90 % 4) + 4) % 4; ++r) {
      const int ny = sx, nx = w - 1 - sy;
      sy = ny;
      sx = nx;
    }
    if (draw.vflip) sy = h - 1 - sy;
    if (draw.hflip) sx = w - 1 - sx;
    return std::pair{sy, sx};
  };
  ImageGrid out_img{Tensor({3, h, w})};
  MaskGrid out_mask(h, w);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const auto [sy, sx] = source(y, x);
      out_mask.at(y, x) = mask.at(sy, sx);
      for (int c = 0; c < 3; ++c) out_img.pixels.at(c, y, x) = image.pixels.at(c, sy, sx);
    }
  }
  if (!draw.geometric_only()) {
    const double ca = std::cos(draw.hue), sa = std::sin(draw.hue);
    const double k = (1 - ca) / 3.0, s3 = std::sqrt(1.0 / 3.0) * sa;
    const double m[3][3] = {{ca + k, k - s3, k + s3}, {k + s3, ca + k, k - s3}, {k - s3, k + s3, ca + k}};
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        double rgb[3];
        for (int c = 0; c < 3; ++c) rgb[c] = out_img.pixels.at(c, y, x);
        for (int c = 0; c < 3; ++c) {
          const double v = m[c][0] * rgb[0] + m[c][1] * rgb[1] + m[c][2] * rgb[2] + draw.brightness;
          out_img.pixels.at(c, y, x) = std::clamp(v, 0.0, 1.0);
        }
      }
    }
  }
  return {std::move(out_img), std::move(out_mask)};
}

std::pair<ImageGrid, MaskGrid> augment_support(const ImageGrid& image, const MaskGrid& mask,
                                               std::uint64_t rng_seed) {
  return apply_augmentation(image, mask, draw_augmentation(rng_seed));
}

ImageGrid synthesize_pseudo_target(const ImageGrid& image, std::uint64_t rng_seed) {
  Rng rng(derive_seed(rng_seed, {0x7073ULL}));
  const int h = image.height(), w = image.width();
  const double gamma = std::exp(rng.uniform(-0.7, 0.7));
  const double mix = rng.uniform(0.3, 0.9);
  std::array<int, 3> perm{0, 1, 2};
  std::shuffle(perm.begin(), perm.end(), rng.engine());
  std::array<double, 3> gain{};
  for (double& g : gain) g = rng.uniform(0.7, 1.2);
  const double amp = rng.uniform(0.05, 0.15);
  const ValueNoise noise(rng.engine()(), rng.uniform(4.0, 16.0));
  ImageGrid out{Tensor({3, h, w})};
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const double n = amp * noise.at((x + 0.5) / w, (y + 0.5) / h);
      for (int c = 0; c < 3; ++c) {
        const double mixed = (1 - mix) * image.pixels.at(c, y, x) + mix * image.pixels.at(perm[c], y, x);
        out.pixels.at(c, y, x) = std::clamp(gain[c] * std::pow(std::clamp(mixed, 0.0, 1.0), gamma) + n, 0.0, 1.0);
      }
    }
  }
  return out;
}

ExportedSource::ExportedSource(DomainSpec domain, std::vector<StoredScene> scenes)
    : domain_(std::move(domain)), scenes_(std::move(scenes)) {
  for (std::size_t i = 0; i < scenes_.size(); ++i) by_class_[scenes_[i].class_id].push_back(i);
}

Episode ExportedSource::episode(std::uint64_t rng_seed, int k_shots) const {
  if (k_shots < 1) throw std::invalid_argument("k_shots must be >= 1");
  std::vector<int> eligible;
  for (const auto& [cls, idx] : by_class_) {
    if (static_cast<int>(idx.size()) >= k_shots + 1) eligible.push_back(cls);
  }
  if (eligible.empty()) throw MissingArtifact("exported domain has too few scenes per class for this shot count");
  Rng rng(derive_seed(rng_seed, {0x6578ULL}));
  Episode ep;
  ep.domain_id = domain_.domain_id;
  ep.class_id = eligible[rng.uniform_int(0, static_cast<int>(eligible.size()) - 1)];
  std::vector<std::size_t> pool = by_class_.at(ep.class_id);
  std::shuffle(pool.begin(), pool.end(), rng.engine());
  for (int k = 0; k < k_shots; ++k) {
    const Scene& s = scenes_[pool[k]].scene;
    ep.support.push_back({s.image, s.mask});
  }
  ep.query_image = scenes_[pool[k_shots]].scene.image;
  ep.query_mask = scenes_[pool[k_shots]].scene.mask;
  return ep;
}

std::filesystem::path export_domain(const DomainSpec& domain, const std::filesystem::path& root,
                                    int scenes_per_class, std::uint64_t seed) {
  const std::filesystem::path dir = root / ("domain_" + std::to_string(domain.domain_id));
  std::filesystem::create_directories(dir);
  std::ofstream manifest(dir / "manifest.txt");
  if (!manifest) throw std::runtime_error("cannot write manifest in " + dir.string());
  for (int cls : domain.class_set) {
    for (int i = 0; i < scenes_per_class; ++i) {
      const std::uint64_t s =
          derive_seed(seed, {static_cast<std::uint64_t>(domain.domain_id), static_cast<std::uint64_t>(cls),
                             static_cast<std::uint64_t>(i)});
      const Scene scene = generate_scene(s, domain, cls);
      const std::string stem = "c" + std::to_string(cls) + "_" + std::to_string(i);
      io::write_ppm(dir / (stem + ".ppm"), scene.image);
      io::write_pgm(dir / (stem + "_mask.pgm"), scene.mask);
      manifest << s << ' ' << cls << ' ' << stem << ".ppm " << stem << "_mask.pgm\n";
    }
  }
  return dir;
}

ExportedSource load_exported_domain(const DomainSpec& domain, const std::filesystem::path& dir) {
  std::ifstream manifest(dir / "manifest.txt");
  if (!manifest) throw MissingArtifact("no manifest.txt in " + dir.string());
  std::vector<StoredScene> scenes;
  std::string line;
  int line_no = 0;
  while (std::getline(manifest, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ls(line);
    StoredScene s;
    std::string image_file, mask_file;
    if (!(ls >> s.seed >> s.class_id >> image_file >> mask_file)) {
      throw std::runtime_error((dir / "manifest.txt").string() + ":" + std::to_string(line_no) +
                               ": malformed manifest line");
    }
    s.scene.image = io::read_ppm(dir / image_file);
    s.scene.mask = io::read_pgm_mask(dir / mask_file);
    scenes.push_back(std::move(s));
  }
  return ExportedSource(domain, std::move(scenes));
}

}  // namespace dcdnet::data
