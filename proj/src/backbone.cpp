#include "dcdnet/backbone.hpp"

#include "dcdnet/errors.hpp"

namespace dcdnet {

Backbone::Backbone(const ModelConfig& cfg) : image_size_(cfg.image_size) {
  if (cfg.image_size % 8 != 0) throw ShapeError("image size must be a multiple of 8");
  Rng rng(derive_seed(cfg.init_seed, {0xbbULL}));
  const int stem_ch = cfg.c_shared / 2;
  stem_ = nn::ConvBlock("backbone.stem", 3, stem_ch, 2, rng);
  stage1_ = nn::ConvBlock("backbone.stage1", stem_ch, cfg.c_shared, 2, rng);
  stage2a_ = nn::ConvBlock("backbone.stage2a", cfg.c_shared, cfg.mid_channels(), 2, rng);
  stage2b_ = nn::ConvBlock("backbone.stage2b", cfg.mid_channels(), cfg.mid_channels(), 1, rng);
  stage3a_ = nn::ConvBlock("backbone.stage3a", cfg.mid_channels(), cfg.c_private, 1, rng);
  stage3b_ = nn::ConvBlock("backbone.stage3b", cfg.c_private, cfg.c_private, 1, rng);
  base_proj_ = nn::Conv2d("backbone.base_proj", cfg.c_private, cfg.c_f, 1, 1, 0, rng);
}

BackboneFeatures Backbone::extract(const data::ImageGrid& image) const {
  if (image.pixels.shape() != Shape{3, image_size_, image_size_}) {
    throw ShapeError("backbone expects " + shape_str({3, image_size_, image_size_}) + ", got " +
                     shape_str(image.pixels.shape()));
  }
  const ag::Var x = ag::constant(image.pixels);
  BackboneFeatures f;
  f.low = stage1_.forward(stem_.forward(x));
  f.high = stage3b_.forward(stage3a_.forward(stage2b_.forward(stage2a_.forward(f.low))));
  f.base = base_proj_.forward(f.high);
  return f;
}

void Backbone::freeze() {
  for (nn::Parameter* p : parameters()) p->set_trainable(false);
  frozen_ = true;
}

nn::ParamList Backbone::parameters() {
  nn::ParamList p;
  for (nn::ConvBlock* b : {&stem_, &stage1_, &stage2a_, &stage2b_, &stage3a_, &stage3b_}) nn::append(p, b->parameters());
  nn::append(p, base_proj_.parameters());
  return p;
}

}  // namespace dcdnet
