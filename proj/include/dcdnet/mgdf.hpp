#pragma once

#include "dcdnet/acfd.hpp"
#include "dcdnet/model_config.hpp"
#include "dcdnet/nn.hpp"

// Spatially weighted fusion of the base, shared and private streams.
namespace dcdnet::mgdf {

struct Streams {
  bool base = true;
  bool shared = true;
  bool priv = true;

  int count() const { return int{base} + int{shared} + int{priv}; }
};

// One 1 x H' x W' map per enabled stream; disabled streams stay undefined.
struct FusionWeights {
  ag::Var w_b, w_s, w_p;
};

struct FuseOptions {
  const Tensor* logits_override = nullptr;  // [n_streams, H', W'] pre-softmax weights
  bool enhancement = true;                  // include G(F^c)
};

struct FuseResult {
  ag::Var fused;
  ag::Var concat;  // F^c
  FusionWeights weights;
};

class Mgdf {
 public:
  Mgdf() = default;
  Mgdf(const ModelConfig& cfg, Streams streams = {});

  // F^c = Conv1x1([F^b; S; P]) over the enabled streams.
  ag::Var fuse_concat(const acfd::DecomposedFeatures& f) const;
  FusionWeights fusion_weights(const ag::Var& f_c, const Tensor* logits_override = nullptr) const;
  // sum_k w_k X_k + G(F^c), G(x) = x + Conv1x1(x).
  FuseResult fuse(const acfd::DecomposedFeatures& f, const FuseOptions& opt = {}) const;

  const Streams& streams() const { return streams_; }
  nn::Conv2d& reduce() { return reduce_; }
  nn::Conv2d& weight_conv() { return weight_conv_; }
  nn::Conv2d& enhance() { return enhance_; }
  nn::ParamList parameters();

 private:
  std::vector<ag::Var> enabled(const acfd::DecomposedFeatures& f) const;

  int channels_ = 0;
  Streams streams_;
  nn::Conv2d reduce_, weight_conv_, enhance_;
};

}  // namespace dcdnet::mgdf
