#include "dcdnet/cam.hpp"

#include "dcdnet/errors.hpp"

namespace dcdnet::cam {

ag::Var modulate(const ag::Var& priv, const ModulationParams& params) {
  require_same_shape(priv.value(), params.gamma.value(), "modulate gamma");
  require_same_shape(priv.value(), params.beta.value(), "modulate beta");
  return priv * ag::add_scalar(params.gamma, 1.0) + params.beta;
}

Cam::Cam(const ModelConfig& cfg, std::uint64_t seed) : channels_(cfg.c_f) {
  Rng rng(derive_seed(cfg.init_seed, {0xca3ULL, seed}));
  interact_ = nn::Conv2d("cam.interact", 2 * cfg.c_f, cfg.c_f, 3, 1, 1, rng);
  params_ = nn::Conv2d("cam.params", cfg.c_f, 2 * cfg.c_f, 1, 1, 0, rng);
  params_.zero_init();
}

ag::Var Cam::interact(const ag::Var& shared, const ag::Var& priv) const {
  require_same_shape(shared.value(), priv.value(), "cam interact");
  if (shared.dim(0) != channels_) throw ShapeError("cam expects " + std::to_string(channels_) + " channels");
  return ag::relu(interact_.forward(ag::concat0({shared, priv})));
}

ModulationParams Cam::gen_params(const ag::Var& f_a) const {
  if (f_a.value().rank() != 3 || f_a.dim(0) != channels_) throw ShapeError("cam params expect C_f channels");
  const ag::Var t = ag::tanh(params_.forward(f_a));
  return {ag::slice0(t, 0, channels_), ag::slice0(t, channels_, 2 * channels_)};
}

ag::Var Cam::forward(const ag::Var& shared, const ag::Var& priv) const {
  return modulate(priv, gen_params(interact(shared, priv)));
}

nn::ParamList Cam::parameters() {
  nn::ParamList p = interact_.parameters();
  nn::append(p, params_.parameters());
  return p;
}

}  // namespace dcdnet::cam
