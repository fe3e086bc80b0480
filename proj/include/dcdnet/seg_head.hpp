#pragma once

#include <span>
#include <vector>

#include "dcdnet/data_synth.hpp"
#include "dcdnet/nn.hpp"

// Prototype segmentation heads (simplified self-support matching for
// training, simplified prototype/mask cyclic refinement for fine-tuning and
// testing) and the mIoU metric.
namespace dcdnet::seg {

struct HeadConfig {
  double temperature = 0.1;
  double conf_hi = 0.7;
  double conf_lo = 0.3;
  double blend = 0.5;  // weight of the support prototype when blending
  int bfp_rounds = 3;
  double threshold = 0.5;
  bool self_support = true;  // second matching step of the training head
  bool query_refine = true;  // refinement rounds of the test head
};

// Unit-norm C_f vectors.
struct Prototype {
  ag::Var fg;
  ag::Var bg;
};

// Mean of the columns where the (area-downsampled, re-binarised) mask is set,
// L2-normalised; global average if the downsampled mask is empty.
ag::Var masked_average_pool(const ag::Var& feat, const data::MaskGrid& mask);
// Same with a binary weight map already at feature resolution.
ag::Var masked_average_pool(const ag::Var& feat, const Tensor& weights);

// Foreground prototypes from the masks, background from the complements,
// averaged over shots.
Prototype support_prototype(std::span<const ag::Var> feats, std::span<const data::MaskGrid> masks);

// sigmoid((cos(q, fg) - cos(q, bg)) / T), the fg entry of the 2-way softmax -> [1,h,w].
ag::Var prototype_score(const ag::Var& query, const Prototype& proto, double temperature);

struct HeadOutput {
  ag::Var score_low;  // [1,h,w]
  ag::Var score;      // [1,H,W]
  ag::Var initial_score;  // step-1 / round-0 score at [1,H,W]
  bool refined = false;   // false when the refinement step found nothing to use
  int rounds = 0;
};

HeadOutput ssp_predict(std::span<const ag::Var> support_feats, std::span<const data::MaskGrid> support_masks,
                       const ag::Var& query_feat, int image_size, const HeadConfig& cfg);
HeadOutput bfp_predict(std::span<const ag::Var> support_feats, std::span<const data::MaskGrid> support_masks,
                       const ag::Var& query_feat, int image_size, const HeadConfig& cfg);

struct Prediction {
  Tensor fg_score;  // [H,W] in [0,1]
  data::MaskGrid mask;
};

Prediction to_prediction(const Tensor& score, double threshold = 0.5);

struct IouCounts {
  double fg_inter = 0, fg_union = 0;
  double bg_inter = 0, bg_union = 0;

  void add(const data::MaskGrid& pred, const data::MaskGrid& gt);
  void add(const IouCounts& other);
  double fg_iou() const;
  double bg_iou() const;
  double miou(bool fg_only = false) const;
};

// Totals intersections and unions per class over the whole list before
// dividing; an empty union counts as IoU 1.
double miou(std::span<const Prediction> preds, std::span<const data::MaskGrid> gts, bool fg_only = false);

// Carries the head settings; the temperature is the only stored state.
class SegHead {
 public:
  SegHead() : SegHead(HeadConfig{}) {}
  explicit SegHead(const HeadConfig& cfg);

  HeadConfig config() const;
  void set_config(const HeadConfig& cfg);
  nn::ParamList parameters() { return {&temperature_}; }

 private:
  HeadConfig cfg_;
  nn::Parameter temperature_;
};

}  // namespace dcdnet::seg
