#pragma once

#include <cstdint>

namespace dcdnet {

struct ModelConfig {
  int image_size = 64;
  int c_shared = 32;   // low tap channels (H/4)
  int c_private = 64;  // high tap channels (H/8)
  int c_f = 64;        // decomposed / fused feature channels
  int d_proj = 32;     // contrastive embedding size
  int ca_reduction = 8;
  int disc_hidden = 32;
  bool disc_class_head = false;  // auxiliary class logits next to the domain logit
  int num_source_classes = 12;
  std::uint64_t init_seed = 1;

  int mid_channels() const { return (c_shared + c_private) / 2; }
  int low_size() const { return image_size / 4; }
  int high_size() const { return image_size / 8; }
};

}  // namespace dcdnet
