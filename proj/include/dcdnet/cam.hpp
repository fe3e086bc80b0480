#pragma once

#include "dcdnet/model_config.hpp"
#include "dcdnet/nn.hpp"

// Cross-adaptive modulation: shared features produce a per-position affine
// transform of the private features.
namespace dcdnet::cam {

// Both C_f x H' x W', every element in [-1, 1].
struct ModulationParams {
  ag::Var gamma;
  ag::Var beta;
};

// P (.) (1 + gamma) + beta.
ag::Var modulate(const ag::Var& priv, const ModulationParams& params);

class Cam {
 public:
  Cam() = default;
  // The parameter conv starts at zero, so a fresh module is the identity.
  explicit Cam(const ModelConfig& cfg, std::uint64_t seed = 0);

  // F^a = ReLU(Conv3x3([S; P])).
  ag::Var interact(const ag::Var& shared, const ag::Var& priv) const;
  // tanh(Conv1x1(F^a)) split into gamma and beta.
  ModulationParams gen_params(const ag::Var& f_a) const;
  ag::Var forward(const ag::Var& shared, const ag::Var& priv) const;

  nn::Conv2d& interact_conv() { return interact_; }
  nn::Conv2d& param_conv() { return params_; }
  nn::ParamList parameters();

 private:
  int channels_ = 0;
  nn::Conv2d interact_, params_;
};

}  // namespace dcdnet::cam
