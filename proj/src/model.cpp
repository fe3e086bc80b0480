#include "dcdnet/model.hpp"

#include <stdexcept>

#include "dcdnet/errors.hpp"

namespace dcdnet {

AblationSwitches AblationSwitches::baseline() {
  AblationSwitches s;
  s.use_mgdf = s.use_acfd = s.use_cam = false;
  s.use_adv = s.use_cont = s.use_ortho = false;
  return s;
}

void AblationSwitches::validate() const {
  if (use_mgdf && !(use_base || use_private || use_shared)) {
    throw std::invalid_argument("fusion enabled with no feature stream selected");
  }
}

DcdNet::DcdNet(const ModelConfig& cfg, const AblationSwitches& sw, const seg::HeadConfig& head)
    : cfg_(cfg), sw_(sw), backbone_(cfg), shared_(cfg), private_(cfg), proj_(cfg), disc_(cfg), head_(head) {
  sw_.validate();
  mgdf::Streams streams{sw.use_base, sw.use_shared, sw.use_private};
  if (!sw.use_mgdf) streams = {};
  mgdf_ = std::make_unique<mgdf::Mgdf>(cfg, streams);
}

ImageFeatures DcdNet::features(const data::ImageGrid& image, Phase phase) const {
  return features_from(backbone_.extract(image), phase);
}

ImageFeatures DcdNet::features_from(const BackboneFeatures& bb, Phase phase) const {
  ImageFeatures f;
  f.backbone = bb;
  f.decomposed.base = bb.base;
  if (!has_branches()) {
    f.seg = bb.base;
    return f;
  }
  f.decomposed.shared = shared_.forward(bb.low).output;
  f.decomposed.priv = private_.forward(bb.high).output;
  f.fused_input_priv = f.decomposed.priv;
  if (!sw_.use_mgdf) {
    f.seg = bb.base;
    return f;
  }
  if (cam_ && phase != Phase::kTrain) f.fused_input_priv = cam_->forward(f.decomposed.shared, f.decomposed.priv);
  acfd::DecomposedFeatures in = f.decomposed;
  in.priv = f.fused_input_priv;
  mgdf::FuseResult r = mgdf_->fuse(in);
  f.seg = r.fused;
  f.weights = r.weights;
  return f;
}

seg::HeadOutput DcdNet::predict(std::span<const ag::Var> support_seg, std::span<const data::MaskGrid> support_masks,
                                const ag::Var& query_seg, Phase phase) const {
  const seg::HeadConfig h = head_.config();
  if (phase == Phase::kTrain) return seg::ssp_predict(support_seg, support_masks, query_seg, cfg_.image_size, h);
  return seg::bfp_predict(support_seg, support_masks, query_seg, cfg_.image_size, h);
}

seg::HeadOutput DcdNet::predict(std::span<const data::SupportPair> supports, const data::ImageGrid& query,
                                Phase phase) const {
  std::vector<ag::Var> feats;
  std::vector<data::MaskGrid> masks;
  for (const data::SupportPair& s : supports) {
    feats.push_back(features(s.image, phase).seg);
    masks.push_back(s.mask);
  }
  return predict(feats, masks, features(query, phase).seg, phase);
}

void DcdNet::reset_cam(std::uint64_t seed) {
  if (sw_.use_cam && sw_.use_mgdf) cam_ = std::make_unique<cam::Cam>(cfg_, seed);
}

std::vector<std::pair<std::string, nn::ParamList>> DcdNet::parameter_groups() {
  std::vector<std::pair<std::string, nn::ParamList>> g;
  g.emplace_back("backbone", backbone_.parameters());
  g.emplace_back("shared_branch", shared_.parameters());
  g.emplace_back("private_branch", private_.parameters());
  g.emplace_back("projection_head", proj_.parameters());
  g.emplace_back("discriminator", disc_.parameters());
  g.emplace_back("mgdf", mgdf_->parameters());
  if (cam_) g.emplace_back("cam", cam_->parameters());
  g.emplace_back("seg_head", head_.parameters());
  return g;
}

nn::ParamList DcdNet::main_parameters() {
  nn::ParamList p;
  if (has_branches()) {
    nn::append(p, shared_.parameters());
    nn::append(p, private_.parameters());
    if (sw_.use_acfd && sw_.use_cont) nn::append(p, proj_.parameters());
  }
  if (sw_.use_mgdf) nn::append(p, mgdf_->parameters());
  return p;
}

nn::ParamList DcdNet::finetune_parameters() {
  nn::ParamList p;
  if (sw_.use_mgdf) nn::append(p, mgdf_->parameters());
  if (cam_) nn::append(p, cam_->parameters());
  return p;
}

void copy_parameters(const nn::ParamList& from, const nn::ParamList& to) {
  if (from.size() != to.size()) throw ShapeError("parameter lists differ in length");
  for (std::size_t i = 0; i < from.size(); ++i) {
    require_same_shape(from[i]->value(), to[i]->value(), from[i]->name().c_str());
    to[i]->mutable_value() = from[i]->value();
  }
}

}  // namespace dcdnet
