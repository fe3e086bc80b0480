#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "dcdnet/config.hpp"
#include "dcdnet/data_synth.hpp"
#include "dcdnet/model.hpp"

namespace dcdnet::train {

// Source domain (id 0) plus the target domains, live or read from an export.
struct DataSet {
  std::vector<data::DomainSpec> specs;
  std::vector<std::unique_ptr<data::EpisodeSource>> sources;

  const data::EpisodeSource& domain(int id) const;
  const data::EpisodeSource& source() const { return domain(0); }
};

// Throws MissingArtifact when `cfg.data_dir` is set but incomplete.
DataSet make_dataset(const RunConfig& cfg);

struct LossBundle {
  double ce = 0, adv = 0, cont = 0, ortho = 0;
  double disc_real = 0, disc_fake = 0, disc = 0;
  double total = 0;
  bool no_pair = false;
};

struct LossWeights {
  double ce = 1.0, adv = 0.1, cont = 0.1, ortho = 0.01;
  static LossWeights from(const TrainConfig& cfg);
};

// Undefined terms are left out of the total.
struct MainLossTerms {
  ag::Var ce, adv, cont, ortho;
};

// lambda_ce*L_ce + lambda_adv*L_adv + lambda_cont*L_cont + lambda_ortho*L_ortho.
// A non-finite component raises NumericalAbort naming it.
ag::Var main_loss(const MainLossTerms& terms, const LossWeights& w, LossBundle* bundle = nullptr);

struct DiscLoss {
  ag::Var total;  // L_real + L_fake
  ag::Var real;
  ag::Var fake;
};

// BCE of the domain probability against 1 (source) and 0 (pseudo-target) on
// detached shared features.
DiscLoss disc_loss(std::span<const ag::Var> real_shared, std::span<const ag::Var> fake_shared,
                   const acfd::Discriminator& disc);

// Pixel-wise BCE of an upsampled score map against a mask.
ag::Var segmentation_loss(const ag::Var& score, const data::MaskGrid& mask);

enum class UpdateKind { kPretrain, kMain, kDisc, kFinetune };
const char* update_kind_name(UpdateKind k);

struct UpdateRecord {
  long iteration = 0;
  UpdateKind kind = UpdateKind::kMain;
  std::uint64_t main_before = 0, main_after = 0;
  std::uint64_t disc_before = 0, disc_after = 0;
  std::uint64_t backbone = 0;
};
using UpdateLog = std::vector<UpdateRecord>;

struct EpochRow {
  int epoch = 0;
  std::string phase;
  LossBundle losses;  // means over the epoch's updates
  std::map<int, double> miou;  // domain id -> monitor mIoU
};

class MetricsLog {
 public:
  void add(EpochRow row) { rows_.push_back(std::move(row)); }
  const std::vector<EpochRow>& rows() const { return rows_; }
  std::string csv() const;
  void write_csv(const std::filesystem::path& path) const;

 private:
  std::vector<EpochRow> rows_;
};

struct EpisodeScore {
  int episode_id = 0;
  int domain_id = 0;
  int class_id = 0;
  double fg_iou = 0, bg_iou = 0;
};

struct DomainEval {
  int domain_id = 0;
  int shots = 1;
  seg::IouCounts counts;
  std::vector<EpisodeScore> episodes;
  double miou(bool fg_only = false) const { return counts.miou(fg_only); }
};

std::uint64_t eval_episode_seed(std::uint64_t base, int domain_id, int index);

// Predicts `episodes` fixed episodes (seeded by `seed`) without recording
// gradients.
DomainEval evaluate_domain(const DcdNet& model, const data::EpisodeSource& src, int episodes, int shots,
                           std::uint64_t seed, Phase phase = Phase::kEval);
std::string episode_csv(std::span<const DomainEval> evals);

struct PhaseHooks {
  MetricsLog* metrics = nullptr;
  UpdateLog* updates = nullptr;
  std::function<void(int epoch, DcdNet&)> on_epoch;  // e.g. periodic checkpoints
  const DataSet* monitor = nullptr;                  // per-epoch target mIoU
};

// Baseline: backbone + training head on the base feature, trained with
// cross-entropy on source episodes, then frozen.
std::unique_ptr<DcdNet> pretrain_baseline(const RunConfig& cfg, const DataSet& data, const PhaseHooks& hooks = {});

// A model with `cfg.switches` that starts from a pretrained (frozen) backbone.
std::unique_ptr<DcdNet> from_pretrained(DcdNet& pretrained, const RunConfig& cfg);

struct TrainStats {
  long iterations = 0;
  int no_pair_steps = 0;
  double initial_cross_correlation = 0;
  double final_cross_correlation = 0;
};

// Alternating optimisation: per iteration, s_steps SGD updates of the main
// model on the composite loss, then d_steps Adam updates of the
// discriminator. The backbone must already be frozen.
TrainStats train_dcdnet(DcdNet& model, const RunConfig& cfg, const DataSet& data, const PhaseHooks& hooks = {});

// The only view of target data the fine-tuning phase receives. Supports come
// out; query masks do not.
class SupportOnlySource {
 public:
  explicit SupportOnlySource(const data::EpisodeSource& src) : src_(&src) {}

  struct SupportSet {
    int class_id = -1;
    std::vector<data::SupportPair> supports;
  };

  SupportSet supports(std::uint64_t seed, int k_shots) const;
  // Always throws ContractViolation; counts the attempt.
  const data::MaskGrid& query_mask(std::uint64_t seed) const;
  int query_mask_accesses() const { return accesses_; }
  const data::DomainSpec& domain() const { return src_->domain(); }

 private:
  const data::EpisodeSource* src_;
  mutable int accesses_ = 0;
};

struct FinetuneStats {
  int updates = 0;
  int query_mask_accesses = 0;
  std::vector<double> epoch_loss;
};

// Support-only adaptation to one target domain: fresh identity modulation,
// refinement head, pseudo-episodes built from a pool of support sets.
FinetuneStats finetune_target(DcdNet& model, const SupportOnlySource& target, int k_shots, const RunConfig& cfg,
                              const PhaseHooks& hooks = {});

struct AblationCell {
  std::string table;  // module | feature | loss
  std::string row;
  std::vector<double> per_seed;            // mean target mIoU per seed
  std::map<int, double> per_domain;        // seed-averaged
  double mean = 0;
};

struct AblationReport {
  std::vector<int> seeds;
  std::vector<AblationCell> cells;
  // Full-model fine-tuning and shot comparisons, seed-averaged per domain.
  std::map<int, double> full_pre_finetune, full_post_finetune, full_one_shot, full_five_shot;

  const AblationCell& cell(const std::string& table, const std::string& row) const;
  std::string markdown() const;
  std::string csv() const;
};

using ProgressFn = std::function<void(const std::string&)>;

// Module rows {none, +MGDF, +MGDF+ACFD, +all}, feature rows {base,
// private+shared, all}, loss rows {none, adv, cont, adv+cont, all}; each
// cell is the seed mean of the target-domain mean mIoU. Without `pretrained`
// every seed pretrains its own baseline.
AblationReport run_ablation_suite(const RunConfig& base, const ProgressFn& progress = {},
                                  DcdNet* pretrained = nullptr);

}  // namespace dcdnet::train
