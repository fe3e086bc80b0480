#include "dcdnet/seg_head.hpp"

#include <algorithm>
#include <stdexcept>

#include "dcdnet/errors.hpp"

namespace dcdnet::seg {

namespace {

Tensor complement(const Tensor& w) {
  Tensor c(w.shape());
  for (std::size_t i = 0; i < w.size(); ++i) c[i] = 1.0 - w[i];
  return c;
}

ag::Var blend_unit(const ag::Var& a, const ag::Var& b, double wa) {
  return ag::normalize0(ag::mul_scalar(a, wa) + ag::mul_scalar(b, 1.0 - wa));
}

void require_supports(std::span<const ag::Var> feats, std::span<const data::MaskGrid> masks) {
  if (feats.empty() || feats.size() != masks.size()) throw std::invalid_argument("need matching, nonempty supports");
}

Prototype query_prototype(const ag::Var& query, const data::MaskGrid& mask) {
  const Tensor w = data::downsample_mask(mask, query.dim(1), query.dim(2));
  return {masked_average_pool(query, w), masked_average_pool(query, complement(w))};
}

}  // namespace

ag::Var masked_average_pool(const ag::Var& feat, const Tensor& weights) {
  if (feat.value().rank() != 3) throw ShapeError("masked_average_pool expects C x H x W");
  if (weights.sum() <= 0) return ag::normalize0(ag::reshape(ag::spatial_mean(feat), {feat.dim(0)}));
  return ag::normalize0(ag::masked_mean_columns(feat, weights));
}

ag::Var masked_average_pool(const ag::Var& feat, const data::MaskGrid& mask) {
  return masked_average_pool(feat, data::downsample_mask(mask, feat.dim(1), feat.dim(2)));
}

Prototype support_prototype(std::span<const ag::Var> feats, std::span<const data::MaskGrid> masks) {
  require_supports(feats, masks);
  ag::Var fg, bg;
  for (std::size_t k = 0; k < feats.size(); ++k) {
    const Tensor w = data::downsample_mask(masks[k], feats[k].dim(1), feats[k].dim(2));
    const ag::Var f = masked_average_pool(feats[k], w);
    const ag::Var b = masked_average_pool(feats[k], complement(w));
    fg = fg.defined() ? fg + f : f;
    bg = bg.defined() ? bg + b : b;
  }
  if (feats.size() == 1) return {fg, bg};
  return {ag::normalize0(fg), ag::normalize0(bg)};
}

ag::Var prototype_score(const ag::Var& query, const Prototype& proto, double temperature) {
  if (!(temperature > 0)) throw std::invalid_argument("temperature must be positive");
  const ag::Var qn = ag::normalize0(query);
  const ag::Var diff = ag::channel_dot(qn, proto.fg) - ag::channel_dot(qn, proto.bg);
  return ag::sigmoid(ag::mul_scalar(diff, 1.0 / temperature));
}

HeadOutput ssp_predict(std::span<const ag::Var> support_feats, std::span<const data::MaskGrid> support_masks,
                       const ag::Var& query_feat, int image_size, const HeadConfig& cfg) {
  require_supports(support_feats, support_masks);
  const Prototype proto = support_prototype(support_feats, support_masks);
  HeadOutput out;
  out.score_low = prototype_score(query_feat, proto, cfg.temperature);
  out.initial_score = ag::resize_bilinear(out.score_low, image_size, image_size);
  out.score = out.initial_score;
  if (!cfg.self_support) return out;

  const Tensor& s = out.score_low.value();
  const int h = query_feat.dim(1), w = query_feat.dim(2);
  Tensor conf_fg({h, w}), conf_bg({h, w});
  for (std::size_t i = 0; i < s.size(); ++i) {
    conf_fg[i] = s[i] > cfg.conf_hi ? 1.0 : 0.0;
    conf_bg[i] = s[i] < cfg.conf_lo ? 1.0 : 0.0;
  }
  const bool have_fg = conf_fg.sum() > 0, have_bg = conf_bg.sum() > 0;
  if (!have_fg && !have_bg) return out;
  Prototype blended = proto;
  if (have_fg) blended.fg = blend_unit(proto.fg, ag::normalize0(ag::masked_mean_columns(query_feat, conf_fg)), cfg.blend);
  if (have_bg) blended.bg = blend_unit(proto.bg, ag::normalize0(ag::masked_mean_columns(query_feat, conf_bg)), cfg.blend);
  out.score_low = prototype_score(query_feat, blended, cfg.temperature);
  out.score = ag::resize_bilinear(out.score_low, image_size, image_size);
  out.refined = true;
  out.rounds = 1;
  return out;
}

HeadOutput bfp_predict(std::span<const ag::Var> support_feats, std::span<const data::MaskGrid> support_masks,
                       const ag::Var& query_feat, int image_size, const HeadConfig& cfg) {
  require_supports(support_feats, support_masks);
  if (cfg.bfp_rounds < 1) throw std::invalid_argument("refinement needs at least one round");
  const Prototype proto = support_prototype(support_feats, support_masks);
  HeadOutput out;
  out.score_low = prototype_score(query_feat, proto, cfg.temperature);
  out.initial_score = ag::resize_bilinear(out.score_low, image_size, image_size);
  out.score = out.initial_score;
  if (!cfg.query_refine) return out;

  for (int r = 0; r < cfg.bfp_rounds; ++r) {
    const Tensor& s = out.score.value();
    double thr = cfg.threshold;
    std::size_t on = 0;
    for (double v : s.values()) on += v > thr ? 1 : 0;
    if (on == 0 || on == s.size()) {
      std::vector<double> sorted(s.values().begin(), s.values().end());
      std::nth_element(sorted.begin(), sorted.begin() + sorted.size() / 2, sorted.end());
      thr = sorted[sorted.size() / 2];
    }
    data::MaskGrid mask(image_size, image_size);
    for (std::size_t i = 0; i < s.size(); ++i) mask.labels[i] = s[i] > thr ? 1 : 0;
    const Prototype q = query_prototype(query_feat, mask);
    const Prototype fused{blend_unit(proto.fg, q.fg, 0.5), blend_unit(proto.bg, q.bg, 0.5)};
    out.score_low = prototype_score(query_feat, fused, cfg.temperature);
    out.score = ag::resize_bilinear(out.score_low, image_size, image_size);
    out.rounds = r + 1;
  }
  out.refined = true;
  return out;
}

Prediction to_prediction(const Tensor& score, double threshold) {
  const int h = score.dim(score.rank() - 2), w = score.dim(score.rank() - 1);
  if (score.size() != static_cast<std::size_t>(h) * w) throw ShapeError("prediction expects a single-channel score");
  Prediction p{score.reshaped({h, w}), data::MaskGrid(h, w)};
  for (std::size_t i = 0; i < score.size(); ++i) p.mask.labels[i] = score[i] > threshold ? 1 : 0;
  return p;
}

void IouCounts::add(const data::MaskGrid& pred, const data::MaskGrid& gt) {
  if (pred.height != gt.height || pred.width != gt.width) throw ShapeError("IoU of differently sized masks");
  for (std::size_t i = 0; i < gt.labels.size(); ++i) {
    const bool p = pred.labels[i] != 0, g = gt.labels[i] != 0;
    fg_inter += (p && g) ? 1 : 0;
    fg_union += (p || g) ? 1 : 0;
    bg_inter += (!p && !g) ? 1 : 0;
    bg_union += (!p || !g) ? 1 : 0;
  }
}

void IouCounts::add(const IouCounts& other) {
  fg_inter += other.fg_inter;
  fg_union += other.fg_union;
  bg_inter += other.bg_inter;
  bg_union += other.bg_union;
}

double IouCounts::fg_iou() const { return fg_union > 0 ? fg_inter / fg_union : 1.0; }
double IouCounts::bg_iou() const { return bg_union > 0 ? bg_inter / bg_union : 1.0; }
double IouCounts::miou(bool fg_only) const { return fg_only ? fg_iou() : 0.5 * (fg_iou() + bg_iou()); }

double miou(std::span<const Prediction> preds, std::span<const data::MaskGrid> gts, bool fg_only) {
  if (preds.size() != gts.size()) throw std::invalid_argument("miou: prediction and label counts differ");
  IouCounts c;
  for (std::size_t i = 0; i < preds.size(); ++i) c.add(preds[i].mask, gts[i]);
  return c.miou(fg_only);
}

SegHead::SegHead(const HeadConfig& cfg) : cfg_(cfg), temperature_("seg_head.temperature", Tensor::scalar(cfg.temperature)) {
  temperature_.set_trainable(false);
}

HeadConfig SegHead::config() const {
  HeadConfig c = cfg_;
  c.temperature = temperature_.value()[0];
  return c;
}

void SegHead::set_config(const HeadConfig& cfg) {
  cfg_ = cfg;
  temperature_.mutable_value()[0] = cfg.temperature;
}

}  // namespace dcdnet::seg
