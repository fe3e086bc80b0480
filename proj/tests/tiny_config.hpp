#pragma once

#include "dcdnet/config.hpp"

// A few-second configuration for pipeline tests.
inline dcdnet::RunConfig tiny_config() {
  dcdnet::RunConfig cfg;
  cfg.model.image_size = 32;
  cfg.bench.image_size = 32;
  cfg.model.c_shared = 8;
  cfg.model.c_private = 16;
  cfg.model.c_f = 16;
  cfg.model.d_proj = 8;
  cfg.model.disc_hidden = 8;
  cfg.train.episodes_per_epoch = 8;
  cfg.train.batch_size = 4;
  cfg.train.epochs = 2;
  cfg.train.pretrain_epochs = 1;
  cfg.train.finetune_epochs = 2;
  cfg.train.finetune_pool = 2;
  cfg.train.finetune_batch = 2;
  cfg.eval.episodes_per_domain = 4;
  cfg.eval.monitor_episodes = 2;
  cfg.ablation_seeds = 1;
  cfg.run_name = "test";
  return cfg;
}
