#include "dcdnet/mgdf.hpp"

#include <stdexcept>

#include "dcdnet/errors.hpp"

namespace dcdnet::mgdf {

Mgdf::Mgdf(const ModelConfig& cfg, Streams streams) : channels_(cfg.c_f), streams_(streams) {
  if (streams.count() == 0) throw std::invalid_argument("fusion needs at least one enabled stream");
  Rng rng(derive_seed(cfg.init_seed, {0x3dfULL}));
  const int n = streams.count();
  reduce_ = nn::Conv2d("mgdf.reduce", n * cfg.c_f, cfg.c_f, 1, 1, 0, rng);
  weight_conv_ = nn::Conv2d("mgdf.weights", cfg.c_f, n, 3, 1, 1, rng);
  enhance_ = nn::Conv2d("mgdf.enhance", cfg.c_f, cfg.c_f, 1, 1, 0, rng);
}

std::vector<ag::Var> Mgdf::enabled(const acfd::DecomposedFeatures& f) const {
  std::vector<ag::Var> parts;
  if (streams_.base) parts.push_back(f.base);
  if (streams_.shared) parts.push_back(f.shared);
  if (streams_.priv) parts.push_back(f.priv);
  for (const ag::Var& p : parts) {
    if (!p.defined()) throw ShapeError("fusion stream missing");
    if (p.value().rank() != 3 || p.dim(0) != channels_ || p.shape() != parts.front().shape()) {
      throw ShapeError("fusion streams must all be " + std::to_string(channels_) + " x H' x W', got " +
                       shape_str(p.shape()));
    }
  }
  return parts;
}

ag::Var Mgdf::fuse_concat(const acfd::DecomposedFeatures& f) const {
  const std::vector<ag::Var> parts = enabled(f);
  return reduce_.forward(parts.size() == 1 ? parts[0] : ag::concat0(parts));
}

FusionWeights Mgdf::fusion_weights(const ag::Var& f_c, const Tensor* logits_override) const {
  const int n = streams_.count();
  ag::Var logits;
  if (logits_override) {
    require_shape(*logits_override, {n, f_c.dim(1), f_c.dim(2)}, "fusion logits override");
    logits = ag::constant(*logits_override);
  } else {
    logits = weight_conv_.forward(f_c);
  }
  const ag::Var sp = ag::softmax0(logits);
  FusionWeights w;
  int k = 0;
  if (streams_.base) w.w_b = ag::slice0(sp, k, k + 1), ++k;
  if (streams_.shared) w.w_s = ag::slice0(sp, k, k + 1), ++k;
  if (streams_.priv) w.w_p = ag::slice0(sp, k, k + 1), ++k;
  return w;
}

FuseResult Mgdf::fuse(const acfd::DecomposedFeatures& f, const FuseOptions& opt) const {
  FuseResult r;
  r.concat = fuse_concat(f);
  r.weights = fusion_weights(r.concat, opt.logits_override);
  ag::Var sum;
  auto acc = [&sum](const ag::Var& term) { sum = sum.defined() ? sum + term : term; };
  if (streams_.priv) acc(r.weights.w_p * f.priv);
  if (streams_.shared) acc(r.weights.w_s * f.shared);
  if (streams_.base) acc(r.weights.w_b * f.base);
  if (opt.enhancement) acc(r.concat + enhance_.forward(r.concat));
  r.fused = sum;
  return r;
}

nn::ParamList Mgdf::parameters() {
  nn::ParamList p = reduce_.parameters();
  nn::append(p, weight_conv_.parameters());
  nn::append(p, enhance_.parameters());
  return p;
}

}  // namespace dcdnet::mgdf
