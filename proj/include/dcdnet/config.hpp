#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "dcdnet/data_synth.hpp"
#include "dcdnet/model.hpp"
#include "dcdnet/model_config.hpp"
#include "dcdnet/seg_head.hpp"

namespace dcdnet {

// Desk-scale defaults. The full-scale schedule is 20 source epochs and 40
// fine-tuning epochs.
struct TrainConfig {
  double lambda_ce = 1.0;
  double lambda_adv = 0.1;
  double lambda_cont = 0.1;
  double lambda_ortho = 0.01;
  int s_steps = 1;
  int d_steps = 1;
  int epochs = 10;
  int episodes_per_epoch = 200;
  int batch_size = 8;
  double lr_main = 1e-3;
  double momentum = 0.9;
  double lr_disc = 1e-4;
  double weight_decay_disc = 0.01;
  double lambda_grl = 1.0;
  double grl_warmup = 0.1;
  double tau = 0.1;
  int bank_capacity = 2048;
  int max_fg_pixels = 64;
  int max_bg_pixels = 64;

  int pretrain_epochs = 10;
  double lr_pretrain = 1e-2;

  int finetune_epochs = 15;
  double lr_finetune = 5e-4;
  int finetune_batch = 4;
  int finetune_pool = 4;  // support sets drawn per target domain

  std::uint64_t seed = 0;

  void validate() const;
};

struct EvalConfig {
  int episodes_per_domain = 50;
  int monitor_episodes = 8;       // per domain, evaluated after every epoch
  std::uint64_t episode_seed = 2024;
  bool fg_only = false;
};

struct RunConfig {
  ModelConfig model;
  seg::HeadConfig head;
  TrainConfig train;
  AblationSwitches switches;
  data::BenchmarkConfig bench;
  EvalConfig eval;
  int shots = 1;
  std::vector<int> domains;  // target domain ids; empty = all
  int ablation_seeds = 3;
  std::string data_dir;      // exported episodes instead of live generation
  std::string run_name;      // defaults to <timestamp>-s<seed>

  void set(const std::string& key, const std::string& value);  // throws std::invalid_argument
  std::vector<int> target_domains() const;
  void validate() const;
};

std::vector<std::string> config_keys();

// key = value lines, '#' comments. Unknown keys and bad values raise
// ConfigError with the 1-based line number.
RunConfig parse_config(const std::string& text, RunConfig base = {});
RunConfig load_config(const std::filesystem::path& path, RunConfig base = {});
// "key=value" from the command line.
void apply_override(RunConfig& cfg, const std::string& assignment);

// Every key with its resolved value, one per line, in a fixed order.
std::string resolved_config(const RunConfig& cfg);

}  // namespace dcdnet
