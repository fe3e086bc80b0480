#pragma once

#include "dcdnet/data_synth.hpp"
#include "dcdnet/model_config.hpp"
#include "dcdnet/nn.hpp"

namespace dcdnet {

struct BackboneFeatures {
  ag::Var low;   // C_shared x H/4 x W/4
  ag::Var high;  // C_private x H/8 x W/8
  ag::Var base;  // C_f x H/8 x W/8, 1x1 projection of `high`
};

// Three conv stages with taps after the first (low) and last (high).
class Backbone {
 public:
  Backbone() = default;
  explicit Backbone(const ModelConfig& cfg);

  BackboneFeatures extract(const data::ImageGrid& image) const;

  // Stops all further updates; idempotent.
  void freeze();
  bool frozen() const { return frozen_; }

  nn::ParamList parameters();

 private:
  int image_size_ = 0;
  nn::ConvBlock stem_, stage1_, stage2a_, stage2b_, stage3a_, stage3b_;
  nn::Conv2d base_proj_;
  bool frozen_ = false;
};

}  // namespace dcdnet
