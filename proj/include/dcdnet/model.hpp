#pragma once

#include <map>
#include <memory>
#include <span>
#include <string>

#include "dcdnet/acfd.hpp"
#include "dcdnet/backbone.hpp"
#include "dcdnet/cam.hpp"
#include "dcdnet/mgdf.hpp"
#include "dcdnet/seg_head.hpp"

namespace dcdnet {

struct AblationSwitches {
  bool use_mgdf = true;
  bool use_acfd = true;
  bool use_cam = true;
  bool use_base = true;
  bool use_private = true;
  bool use_shared = true;
  bool use_adv = true;
  bool use_cont = true;
  bool use_ortho = true;

  static AblationSwitches baseline();
  void validate() const;
  bool operator==(const AblationSwitches&) const = default;
};

enum class Phase { kTrain, kFinetune, kEval };

struct ImageFeatures {
  BackboneFeatures backbone;
  acfd::DecomposedFeatures decomposed;  // shared/priv undefined without the branches
  ag::Var fused_input_priv;             // P, or P^m when modulation is active
  ag::Var seg;                          // feature the prediction head matches on
  mgdf::FusionWeights weights;
};

class DcdNet {
 public:
  DcdNet(const ModelConfig& cfg, const AblationSwitches& sw, const seg::HeadConfig& head = {});

  const ModelConfig& config() const { return cfg_; }
  const AblationSwitches& switches() const { return sw_; }
  seg::HeadConfig head_config() const { return head_.config(); }
  void set_head_config(const seg::HeadConfig& h) { head_.set_config(h); }
  bool has_branches() const { return sw_.use_mgdf || sw_.use_acfd; }

  ImageFeatures features(const data::ImageGrid& image, Phase phase) const;
  // Continues from precomputed (frozen) backbone taps.
  ImageFeatures features_from(const BackboneFeatures& bb, Phase phase) const;

  seg::HeadOutput predict(std::span<const ag::Var> support_seg, std::span<const data::MaskGrid> support_masks,
                          const ag::Var& query_seg, Phase phase) const;
  seg::HeadOutput predict(std::span<const data::SupportPair> supports, const data::ImageGrid& query,
                          Phase phase) const;

  // Fresh identity modulation for a fine-tuning run; a no-op without CAM.
  void reset_cam(std::uint64_t seed);
  void drop_cam() { cam_.reset(); }
  // Turns modulation on or off for later fine-tuning runs.
  void set_use_cam(bool on) {
    sw_.use_cam = on;
    if (!on) cam_.reset();
  }
  bool cam_active() const { return static_cast<bool>(cam_); }

  Backbone& backbone() { return backbone_; }
  const Backbone& backbone() const { return backbone_; }
  acfd::SharedBranch& shared_branch() { return shared_; }
  acfd::PrivateBranch& private_branch() { return private_; }
  acfd::ProjectionHead& projection_head() { return proj_; }
  const acfd::ProjectionHead& projection_head() const { return proj_; }
  acfd::Discriminator& discriminator() { return disc_; }
  const acfd::Discriminator& discriminator() const { return disc_; }
  mgdf::Mgdf& fusion() { return *mgdf_; }
  cam::Cam* modulation() { return cam_.get(); }

  // Named parameter groups in checkpoint order; "cam" only while active.
  std::vector<std::pair<std::string, nn::ParamList>> parameter_groups();
  // Everything updated by the main-model optimizer in source training.
  nn::ParamList main_parameters();
  nn::ParamList discriminator_parameters() { return disc_.parameters(); }
  nn::ParamList finetune_parameters();

 private:
  ModelConfig cfg_;
  AblationSwitches sw_;
  Backbone backbone_;
  acfd::SharedBranch shared_;
  acfd::PrivateBranch private_;
  acfd::ProjectionHead proj_;
  acfd::Discriminator disc_;
  std::unique_ptr<mgdf::Mgdf> mgdf_;
  std::unique_ptr<cam::Cam> cam_;
  seg::SegHead head_;
};

// Copies values group by group; shapes must agree.
void copy_parameters(const nn::ParamList& from, const nn::ParamList& to);

}  // namespace dcdnet
