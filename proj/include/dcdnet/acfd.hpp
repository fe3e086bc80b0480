#pragma once

#include <cstdint>
#include <deque>
#include <optional>
#include <span>
#include <vector>

#include "dcdnet/data_synth.hpp"
#include "dcdnet/model_config.hpp"
#include "dcdnet/nn.hpp"

// Adversarial-contrastive feature decomposition: a shared (structural,
// domain-relevant) branch on the low tap and a private (semantic,
// category-relevant) branch on the high tap, plus the three objectives that
// supervise the split.
namespace dcdnet::acfd {

struct DecomposedFeatures {
  ag::Var base;
  ag::Var shared;
  ag::Var priv;
};

// Per-position gate from channel-wise mean and max maps: 7x7 conv + sigmoid.
class SpatialAttention {
 public:
  SpatialAttention() = default;
  SpatialAttention(const std::string& name, Rng& rng);
  ag::Var forward(const ag::Var& x) const;  // -> [1,H,W] in (0,1)
  nn::ParamList parameters() { return conv_.parameters(); }

 private:
  nn::Conv2d conv_;
};

// Per-channel gate from global average and max pooling through a shared
// bottleneck perceptron + sigmoid.
class ChannelAttention {
 public:
  ChannelAttention() = default;
  ChannelAttention(const std::string& name, int channels, int reduction, Rng& rng);
  ag::Var forward(const ag::Var& x) const;  // -> [C,1,1] in (0,1)
  nn::ParamList parameters();

 private:
  nn::Linear fc1_, fc2_;
};

struct BranchOutput {
  ag::Var gate;    // attention map
  ag::Var gated;   // gate (.) ConvBlock(ConvBlock(x)), before resize/projection
  ag::Var output;  // C_f x H' x W'
};

class SharedBranch {
 public:
  SharedBranch() = default;
  explicit SharedBranch(const ModelConfig& cfg);

  // `gate_override`, when given, replaces the spatial attention map.
  BranchOutput forward(const ag::Var& low, const Tensor* gate_override = nullptr) const;
  nn::ParamList parameters();

 private:
  int c_in_ = 0, out_size_ = 0;
  nn::ConvBlock block1_, block2_;
  SpatialAttention attention_;
  nn::Conv2d proj_;
};

class PrivateBranch {
 public:
  PrivateBranch() = default;
  explicit PrivateBranch(const ModelConfig& cfg);

  BranchOutput forward(const ag::Var& high, const Tensor* gate_override = nullptr) const;
  nn::ParamList parameters();

 private:
  int c_in_ = 0, size_ = 0;
  nn::ConvBlock block1_, block2_;
  ChannelAttention attention_;
  nn::Conv2d proj_;
};

struct GrlConfig {
  double lambda_grl = 1.0;
};

ag::Var grl_forward(const ag::Var& x, const GrlConfig& cfg);
// Test hook: flips the backward sign of grl_forward (process-wide).
void set_grl_sign_corruption(bool on);
bool grl_sign_corrupted();

// Linear warm-up of the reversal strength over the first `warmup_fraction`
// of training iterations.
double grl_lambda_at(double lambda_max, long iteration, long total_iterations, double warmup_fraction = 0.1);

// MLP(GAP(S)): logit 0 is the real/pseudo-target domain logit; with the
// class head enabled, logits 1..num_classes score source classes.
class Discriminator {
 public:
  Discriminator() = default;
  explicit Discriminator(const ModelConfig& cfg);

  ag::Var discriminate(const ag::Var& shared) const;
  int output_dim() const { return output_dim_; }
  int class_offset() const { return 1; }
  bool has_class_head() const { return output_dim_ > 1; }
  nn::ParamList parameters();

 private:
  int channels_ = 0, output_dim_ = 1;
  nn::Linear fc1_, fc2_;
};

inline constexpr double kAdvEps = 1e-7;

// Sigmoid of the domain logit clamped to [eps, 1-eps].
ag::Var domain_probability(const ag::Var& logits);

// (1/N) sum [log D(S_src) + log(1 - D(S_tgt))]. Each shared map passes
// through the gradient reversal layer before the discriminator.
ag::Var adversarial_loss(std::span<const ag::Var> shared_src, std::span<const ag::Var> shared_pseudo_tgt,
                         const Discriminator& disc, const GrlConfig& grl);
// Same quantity from precomputed probabilities (the arithmetic core above).
ag::Var adversarial_loss_from_probs(std::span<const ag::Var> d_src, std::span<const ag::Var> d_tgt);

// Ring buffer of unit embeddings with class labels; FIFO eviction.
class MemoryBank {
 public:
  explicit MemoryBank(int capacity = 2048, int dim = 32);

  // Stores the L2-normalised copy of `embedding`; zero vectors are dropped.
  void enqueue(std::span<const double> embedding, int class_id);
  void clear() { entries_.clear(); }

  int size() const { return static_cast<int>(entries_.size()); }
  int capacity() const { return capacity_; }
  int dim() const { return dim_; }
  Tensor embeddings() const;  // [size, dim]
  std::vector<int> labels() const;
  const std::vector<double>& embedding(int i) const { return entries_[static_cast<std::size_t>(i)].first; }

 private:
  int capacity_, dim_;
  std::deque<std::pair<std::vector<double>, int>> entries_;
};

// Proj(P): 1x1 conv, ReLU, 1x1 conv to d_proj, per-pixel L2 normalisation.
class ProjectionHead {
 public:
  ProjectionHead() = default;
  explicit ProjectionHead(const ModelConfig& cfg);
  ag::Var forward(const ag::Var& priv) const;  // -> [d_proj,H',W'] unit columns
  nn::ParamList parameters();

 private:
  nn::Conv2d fc1_, fc2_;
};

inline constexpr int kBackgroundClass = -1;

struct ContrastiveOptions {
  double tau = 0.1;
  int max_fg_pixels = 64;
  int max_bg_pixels = 64;
  int enqueue_per_class = 8;  // per image, per label
  std::uint64_t seed = 0;
};

struct ContrastiveResult {
  ag::Var loss;  // scalar
  int anchors = 0;
  int skipped = 0;
  bool no_pair = false;
};

// Pixel-level supervised InfoNCE over private features. Positives come from
// same-label pixels in the batch, falling back to the bank; negatives are the
// bank entries with a different label. Foreground pixels carry the image's
// class id, background pixels kBackgroundClass. Fresh embeddings are
// enqueued after the loss is formed.
ContrastiveResult contrastive_loss(std::span<const ag::Var> priv, std::span<const data::MaskGrid> masks,
                                   std::span<const int> class_ids, MemoryBank& bank, const ProjectionHead& head,
                                   const ContrastiveOptions& opt);

// Same loss on already-projected unit embeddings [n, d] with per-row labels.
ContrastiveResult contrastive_loss_embeddings(const ag::Var& z, std::span<const int> labels, const MemoryBank& bank,
                                              double tau, std::uint64_t seed);

inline constexpr double kOrthoEps = 1e-8;

// (1/B) sum_b ||S_b^T P_b||_F^2 / (||S_b||_F ||P_b||_F) with S_b, P_b viewed
// as (H'W') x C matrices; a zero-norm sample contributes 0.
ag::Var orthogonality_loss(std::span<const ag::Var> shared, std::span<const ag::Var> priv);

// Mean |corr(S_c, P_d)| over channel pairs, pixels as observations.
double mean_abs_cross_correlation(const Tensor& shared, const Tensor& priv);

}  // namespace dcdnet::acfd
