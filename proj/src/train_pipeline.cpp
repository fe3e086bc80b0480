#include "dcdnet/train_pipeline.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "dcdnet/errors.hpp"
#include "dcdnet/optim.hpp"

namespace dcdnet::train {

namespace {

constexpr std::uint64_t kPretrainTag = 0x9e7aULL;
constexpr std::uint64_t kTrainTag = 0x7a11ULL;
constexpr std::uint64_t kMonitorTag = 0x3011ULL;
constexpr std::uint64_t kPoolTag = 0xf17eULL;

std::string num(double v) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

std::uint64_t u(long v) { return static_cast<std::uint64_t>(v); }

void check_finite(const ag::Var& v, const std::string& component) {
  if (!v.value().all_finite()) throw NumericalAbort(component, component + " loss is not finite");
}

int steps_per_epoch(const TrainConfig& t) { return std::max(1, t.episodes_per_epoch / t.batch_size); }

void monitor(const DcdNet& model, const RunConfig& cfg, const PhaseHooks& hooks, EpochRow& row, bool with_source) {
  if (!hooks.monitor || cfg.eval.monitor_episodes <= 0) return;
  const std::uint64_t seed = derive_seed(cfg.eval.episode_seed, {kMonitorTag});
  std::vector<int> ids = cfg.target_domains();
  if (with_source) ids.insert(ids.begin(), 0);
  for (int d : ids) {
    row.miou[d] = evaluate_domain(model, hooks.monitor->domain(d), cfg.eval.monitor_episodes, cfg.shots, seed)
                      .miou(cfg.eval.fg_only);
  }
}

void accumulate(LossBundle& acc, const LossBundle& b) {
  acc.ce += b.ce;
  acc.adv += b.adv;
  acc.cont += b.cont;
  acc.ortho += b.ortho;
  acc.total += b.total;
  acc.no_pair = acc.no_pair || b.no_pair;
}

void scale(LossBundle& b, double main_count, double disc_count) {
  if (main_count > 0) {
    b.ce /= main_count;
    b.adv /= main_count;
    b.cont /= main_count;
    b.ortho /= main_count;
    b.total /= main_count;
  }
  if (disc_count > 0) {
    b.disc_real /= disc_count;
    b.disc_fake /= disc_count;
    b.disc /= disc_count;
  }
}

// Probe features for the decomposition statistic.
double probe_cross_correlation(DcdNet& model, const data::EpisodeSource& src, std::uint64_t seed) {
  if (!model.has_branches()) return 0;
  ag::NoGradGuard guard;
  double total = 0;
  constexpr int kProbe = 4;
  for (int i = 0; i < kProbe; ++i) {
    const data::Episode ep = src.episode(derive_seed(seed, {0x9b0eULL, u(i)}), 1);
    const ImageFeatures f = model.features(ep.query_image, Phase::kTrain);
    total += acfd::mean_abs_cross_correlation(f.decomposed.shared.value(), f.decomposed.priv.value());
  }
  return total / kProbe;
}

}  // namespace

const data::EpisodeSource& DataSet::domain(int id) const {
  if (id < 0 || id >= static_cast<int>(sources.size())) throw std::out_of_range("no domain " + std::to_string(id));
  return *sources[static_cast<std::size_t>(id)];
}

DataSet make_dataset(const RunConfig& cfg) {
  DataSet ds;
  ds.specs = data::make_benchmark(cfg.bench);
  for (const data::DomainSpec& spec : ds.specs) {
    if (cfg.data_dir.empty()) {
      ds.sources.push_back(std::make_unique<data::LiveSource>(spec));
    } else {
      const auto dir = std::filesystem::path(cfg.data_dir) / ("domain_" + std::to_string(spec.domain_id));
      ds.sources.push_back(std::make_unique<data::ExportedSource>(data::load_exported_domain(spec, dir)));
    }
  }
  return ds;
}

LossWeights LossWeights::from(const TrainConfig& cfg) {
  return {cfg.lambda_ce, cfg.lambda_adv, cfg.lambda_cont, cfg.lambda_ortho};
}

ag::Var main_loss(const MainLossTerms& terms, const LossWeights& w, LossBundle* bundle) {
  ag::Var total;
  auto add = [&total](const ag::Var& term, double weight, const char* name, double* slot) {
    if (!term.defined()) return;
    check_finite(term, name);
    if (slot) *slot = term.value()[0];
    const ag::Var weighted = ag::mul_scalar(term, weight);
    total = total.defined() ? total + weighted : weighted;
  };
  add(terms.ce, w.ce, "ce", bundle ? &bundle->ce : nullptr);
  add(terms.adv, w.adv, "adv", bundle ? &bundle->adv : nullptr);
  add(terms.cont, w.cont, "cont", bundle ? &bundle->cont : nullptr);
  add(terms.ortho, w.ortho, "ortho", bundle ? &bundle->ortho : nullptr);
  if (!total.defined()) return ag::constant(Tensor::scalar(0.0));
  check_finite(total, "total");
  if (bundle) bundle->total = total.value()[0];
  return total;
}

DiscLoss disc_loss(std::span<const ag::Var> real_shared, std::span<const ag::Var> fake_shared,
                   const acfd::Discriminator& disc) {
  if (real_shared.empty() || fake_shared.empty()) throw std::invalid_argument("discriminator loss needs nonempty batches");
  auto side = [&disc](std::span<const ag::Var> batch, double target) {
    ag::Var acc;
    for (const ag::Var& s : batch) {
      const ag::Var p = acfd::domain_probability(disc.discriminate(ag::detach(s)));
      const ag::Var l = ag::binary_cross_entropy(p, Tensor({1}, target), acfd::kAdvEps);
      acc = acc.defined() ? acc + l : l;
    }
    return ag::mul_scalar(acc, 1.0 / static_cast<double>(batch.size()));
  };
  DiscLoss d;
  d.real = side(real_shared, 1.0);
  d.fake = side(fake_shared, 0.0);
  d.total = d.real + d.fake;
  return d;
}

ag::Var segmentation_loss(const ag::Var& score, const data::MaskGrid& mask) {
  return ag::binary_cross_entropy(score, mask.as_tensor().reshaped({1, mask.height, mask.width}));
}

const char* update_kind_name(UpdateKind k) {
  switch (k) {
    case UpdateKind::kPretrain: return "pretrain";
    case UpdateKind::kMain: return "main";
    case UpdateKind::kDisc: return "disc";
    case UpdateKind::kFinetune: return "finetune";
  }
  return "?";
}

std::string MetricsLog::csv() const {
  std::set<int> domains;
  for (const EpochRow& r : rows_) {
    for (const auto& [d, v] : r.miou) domains.insert(d);
  }
  std::string out = "epoch,phase,ce,adv,cont,ortho,disc_real,disc_fake,disc,total,no_pair";
  for (int d : domains) out += ",miou_d" + std::to_string(d);
  out += "\n";
  for (const EpochRow& r : rows_) {
    const LossBundle& l = r.losses;
    out += std::to_string(r.epoch) + "," + r.phase + "," + num(l.ce) + "," + num(l.adv) + "," + num(l.cont) + "," +
           num(l.ortho) + "," + num(l.disc_real) + "," + num(l.disc_fake) + "," + num(l.disc) + "," +
           num(l.total) + "," + (l.no_pair ? "1" : "0");
    for (int d : domains) {
      auto it = r.miou.find(d);
      out += "," + (it == r.miou.end() ? std::string() : num(it->second));
    }
    out += "\n";
  }
  return out;
}

void MetricsLog::write_csv(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << csv();
}

std::uint64_t eval_episode_seed(std::uint64_t base, int domain_id, int index) {
  return derive_seed(base, {0xe7a1ULL, u(domain_id), u(index)});
}

DomainEval evaluate_domain(const DcdNet& model, const data::EpisodeSource& src, int episodes, int shots,
                           std::uint64_t seed, Phase phase) {
  ag::NoGradGuard guard;
  DomainEval ev;
  ev.domain_id = src.domain().domain_id;
  ev.shots = shots;
  const double thr = model.head_config().threshold;
  for (int i = 0; i < episodes; ++i) {
    const data::Episode ep = src.episode(eval_episode_seed(seed, ev.domain_id, i), shots);
    const seg::HeadOutput out = model.predict(ep.support, ep.query_image, phase);
    const seg::Prediction pred = seg::to_prediction(out.score.value(), thr);
    seg::IouCounts c;
    c.add(pred.mask, ep.query_mask);
    ev.counts.add(c);
    ev.episodes.push_back({i, ev.domain_id, ep.class_id, c.fg_iou(), c.bg_iou()});
  }
  return ev;
}

std::string episode_csv(std::span<const DomainEval> evals) {
  std::string out = "episode_id,domain_id,class_id,fg_iou,bg_iou\n";
  for (const DomainEval& e : evals) {
    for (const EpisodeScore& s : e.episodes) {
      out += std::to_string(s.episode_id) + "," + std::to_string(s.domain_id) + "," + std::to_string(s.class_id) +
             "," + num(s.fg_iou) + "," + num(s.bg_iou) + "\n";
    }
  }
  return out;
}

std::unique_ptr<DcdNet> pretrain_baseline(const RunConfig& cfg, const DataSet& data, const PhaseHooks& hooks) {
  auto model = std::make_unique<DcdNet>(cfg.model, AblationSwitches::baseline(), cfg.head);
  const nn::ParamList params = model->backbone().parameters();
  optim::Sgd opt(params, cfg.train.lr_pretrain, cfg.train.momentum);
  const int steps = steps_per_epoch(cfg.train);
  const int batch = cfg.train.batch_size;
  long it = 0;
  for (int epoch = 0; epoch < cfg.train.pretrain_epochs; ++epoch) {
    LossBundle acc;
    for (int step = 0; step < steps; ++step, ++it) {
      opt.zero_grad();
      const std::uint64_t before = nn::params_checksum(params);
      double ce = 0;
      for (int b = 0; b < batch; ++b) {
        const data::Episode ep =
            data.source().episode(derive_seed(cfg.train.seed, {kPretrainTag, u(epoch), u(step), u(b)}), cfg.shots);
        const seg::HeadOutput out = model->predict(ep.support, ep.query_image, Phase::kTrain);
        const ag::Var loss = segmentation_loss(out.score, ep.query_mask);
        check_finite(loss, "ce");
        ce += loss.value()[0] / batch;
        ag::backward(ag::mul_scalar(loss, 1.0 / batch));
      }
      opt.step();
      acc.ce += ce;
      acc.total += ce;
      if (hooks.updates) {
        UpdateRecord r;
        r.iteration = it;
        r.kind = UpdateKind::kPretrain;
        r.main_before = before;
        r.main_after = r.backbone = nn::params_checksum(params);
        hooks.updates->push_back(r);
      }
    }
    scale(acc, steps, 0);
    EpochRow row{epoch, "pretrain", acc, {}};
    monitor(*model, cfg, hooks, row, true);
    if (hooks.metrics) hooks.metrics->add(row);
    if (hooks.on_epoch) hooks.on_epoch(epoch, *model);
  }
  model->backbone().freeze();
  return model;
}

std::unique_ptr<DcdNet> from_pretrained(DcdNet& pretrained, const RunConfig& cfg) {
  auto model = std::make_unique<DcdNet>(cfg.model, cfg.switches, cfg.head);
  copy_parameters(pretrained.backbone().parameters(), model->backbone().parameters());
  model->backbone().freeze();
  return model;
}

TrainStats train_dcdnet(DcdNet& model, const RunConfig& cfg, const DataSet& data, const PhaseHooks& hooks) {
  if (!model.backbone().frozen()) throw ContractViolation("source training requires a frozen, pretrained backbone");
  const TrainConfig& tc = cfg.train;
  const AblationSwitches sw = model.switches();
  const bool adv_on = sw.use_acfd && sw.use_adv;
  const bool cont_on = sw.use_acfd && sw.use_cont;
  const bool ortho_on = sw.use_acfd && sw.use_ortho;
  const LossWeights weights = LossWeights::from(tc);

  const nn::ParamList main = model.main_parameters();
  const nn::ParamList disc = model.discriminator_parameters();
  const nn::ParamList backbone = model.backbone().parameters();
  TrainStats stats;
  stats.initial_cross_correlation = probe_cross_correlation(model, data.source(), tc.seed);
  if (main.empty()) {
    EpochRow row{0, "train", {}, {}};
    monitor(model, cfg, hooks, row, false);
    if (hooks.metrics) hooks.metrics->add(row);
    stats.final_cross_correlation = stats.initial_cross_correlation;
    return stats;
  }

  optim::Sgd sgd(main, tc.lr_main, tc.momentum);
  optim::Adam adam(disc, tc.lr_disc, tc.weight_decay_disc);
  acfd::MemoryBank bank(tc.bank_capacity, cfg.model.d_proj);
  const int steps = steps_per_epoch(tc);
  const long total_iters = static_cast<long>(steps) * tc.epochs;

  auto record = [&](long iteration, UpdateKind kind, std::uint64_t mb, std::uint64_t db) {
    if (!hooks.updates) return;
    UpdateRecord r;
    r.iteration = iteration;
    r.kind = kind;
    r.main_before = mb;
    r.disc_before = db;
    r.main_after = nn::params_checksum(main);
    r.disc_after = nn::params_checksum(disc);
    r.backbone = nn::params_checksum(backbone);
    hooks.updates->push_back(r);
  };

  long it = 0;
  for (int epoch = 0; epoch < tc.epochs; ++epoch) {
    LossBundle acc;
    int main_updates = 0, disc_updates = 0;
    for (int step = 0; step < steps; ++step, ++it) {
      const acfd::GrlConfig grl{acfd::grl_lambda_at(tc.lambda_grl, it, total_iters, tc.grl_warmup)};
      std::vector<BackboneFeatures> src_taps, tgt_taps;

      for (int s = 0; s < tc.s_steps; ++s) {
        std::vector<ag::Var> shared_all, priv_all, shared_src, shared_tgt;
        std::vector<data::MaskGrid> masks_all;
        std::vector<int> classes_all;
        src_taps.clear();
        tgt_taps.clear();
        ag::Var ce;
        for (int b = 0; b < tc.batch_size; ++b) {
          const std::uint64_t ep_seed = derive_seed(tc.seed, {kTrainTag, u(epoch), u(step), u(s), u(b)});
          const data::Episode ep = data.source().episode(ep_seed, cfg.shots);
          std::vector<ag::Var> sup_seg;
          std::vector<data::MaskGrid> sup_masks;
          auto take = [&](const ImageFeatures& f, const data::MaskGrid& mask) {
            if (!f.decomposed.shared.defined()) return;
            shared_all.push_back(f.decomposed.shared);
            priv_all.push_back(f.decomposed.priv);
            masks_all.push_back(mask);
            classes_all.push_back(ep.class_id);
          };
          for (const data::SupportPair& sp : ep.support) {
            const ImageFeatures f = model.features(sp.image, Phase::kTrain);
            sup_seg.push_back(f.seg);
            sup_masks.push_back(sp.mask);
            take(f, sp.mask);
          }
          const ImageFeatures fq = model.features(ep.query_image, Phase::kTrain);
          take(fq, ep.query_mask);
          const seg::HeadOutput head = model.predict(sup_seg, sup_masks, fq.seg, Phase::kTrain);
          const ag::Var l = segmentation_loss(head.score, ep.query_mask);
          ce = ce.defined() ? ce + l : l;
          if (adv_on) {
            const data::ImageGrid pseudo = data::synthesize_pseudo_target(ep.query_image, derive_seed(ep_seed, {0x9eULL}));
            const BackboneFeatures pt = model.backbone().extract(pseudo);
            shared_src.push_back(fq.decomposed.shared);
            shared_tgt.push_back(model.shared_branch().forward(pt.low).output);
            src_taps.push_back(fq.backbone);
            tgt_taps.push_back(pt);
          }
        }
        MainLossTerms terms;
        terms.ce = ag::mul_scalar(ce, 1.0 / tc.batch_size);
        LossBundle bundle;
        if (adv_on) terms.adv = acfd::adversarial_loss(shared_src, shared_tgt, model.discriminator(), grl);
        if (cont_on) {
          acfd::ContrastiveOptions opt;
          opt.tau = tc.tau;
          opt.max_fg_pixels = tc.max_fg_pixels;
          opt.max_bg_pixels = tc.max_bg_pixels;
          opt.seed = derive_seed(tc.seed, {0xc047ULL, u(it), u(s)});
          const acfd::ContrastiveResult cr =
              acfd::contrastive_loss(priv_all, masks_all, classes_all, bank, model.projection_head(), opt);
          terms.cont = cr.loss;
          bundle.no_pair = cr.no_pair;
          if (cr.no_pair) ++stats.no_pair_steps;
        }
        if (ortho_on) terms.ortho = acfd::orthogonality_loss(shared_all, priv_all);
        const ag::Var total = main_loss(terms, weights, &bundle);

        const std::uint64_t mb = nn::params_checksum(main), db = nn::params_checksum(disc);
        nn::zero_grad(main);
        nn::zero_grad(disc);
        ag::backward(total);
        sgd.step();
        nn::zero_grad(disc);
        record(it, UpdateKind::kMain, mb, db);
        accumulate(acc, bundle);
        ++main_updates;
      }

      if (adv_on) {
        for (int d = 0; d < tc.d_steps; ++d) {
          std::vector<ag::Var> real, fake;
          {
            ag::NoGradGuard guard;
            for (const BackboneFeatures& t : src_taps) real.push_back(model.shared_branch().forward(t.low).output);
            for (const BackboneFeatures& t : tgt_taps) fake.push_back(model.shared_branch().forward(t.low).output);
          }
          const DiscLoss dl = disc_loss(real, fake, model.discriminator());
          check_finite(dl.total, "disc");
          const std::uint64_t mb = nn::params_checksum(main), db = nn::params_checksum(disc);
          nn::zero_grad(disc);
          ag::backward(dl.total);
          adam.step();
          nn::zero_grad(disc);
          record(it, UpdateKind::kDisc, mb, db);
          acc.disc_real += dl.real.value()[0];
          acc.disc_fake += dl.fake.value()[0];
          acc.disc += dl.total.value()[0];
          ++disc_updates;
        }
      }
      stats.iterations = it + 1;
    }
    scale(acc, main_updates, disc_updates);
    EpochRow row{epoch, "train", acc, {}};
    monitor(model, cfg, hooks, row, false);
    if (hooks.metrics) hooks.metrics->add(row);
    if (hooks.on_epoch) hooks.on_epoch(epoch, model);
  }
  stats.final_cross_correlation = probe_cross_correlation(model, data.source(), tc.seed);
  return stats;
}

SupportOnlySource::SupportSet SupportOnlySource::supports(std::uint64_t seed, int k_shots) const {
  data::Episode ep = src_->episode(seed, k_shots);
  return {ep.class_id, std::move(ep.support)};
}

const data::MaskGrid& SupportOnlySource::query_mask(std::uint64_t) const {
  ++accesses_;
  throw ContractViolation("query masks are not available during fine-tuning");
}

FinetuneStats finetune_target(DcdNet& model, const SupportOnlySource& target, int k_shots, const RunConfig& cfg,
                              const PhaseHooks& hooks) {
  const TrainConfig& tc = cfg.train;
  const int domain = target.domain().domain_id;
  model.reset_cam(derive_seed(tc.seed, {0xca3ULL, u(domain)}));
  FinetuneStats st;
  const nn::ParamList params = model.finetune_parameters();
  if (params.empty() || tc.finetune_epochs == 0) {
    st.query_mask_accesses = target.query_mask_accesses();
    return st;
  }

  std::vector<SupportOnlySource::SupportSet> pool;
  for (int p = 0; p < tc.finetune_pool; ++p) {
    pool.push_back(target.supports(derive_seed(tc.seed, {kPoolTag, u(domain), u(p)}), k_shots));
  }
  optim::Sgd opt(params, tc.lr_finetune, tc.momentum);
  const nn::ParamList backbone = model.backbone().parameters();

  struct Pseudo {
    std::vector<data::SupportPair> supports;
    data::SupportPair query;
  };
  long it = 0;
  for (int epoch = 0; epoch < tc.finetune_epochs; ++epoch) {
    std::vector<Pseudo> episodes;
    for (std::size_t p = 0; p < pool.size(); ++p) {
      const auto& sup = pool[p].supports;
      auto aug = [&](const data::SupportPair& s, std::uint64_t tag) {
        auto [img, mask] = data::augment_support(s.image, s.mask,
                                                 derive_seed(tc.seed, {0xa06ULL, u(domain), u(epoch), u(p), tag}));
        return data::SupportPair{std::move(img), std::move(mask)};
      };
      if (sup.size() == 1) {
        episodes.push_back({{aug(sup[0], 0)}, sup[0]});
        continue;
      }
      for (std::size_t q = 0; q < sup.size(); ++q) {
        Pseudo e;
        e.query = aug(sup[q], 1000 + q);
        for (std::size_t k = 0; k < sup.size(); ++k) {
          if (k != q) e.supports.push_back(aug(sup[k], k));
        }
        episodes.push_back(std::move(e));
      }
    }
    Rng order(derive_seed(tc.seed, {0x0dd3ULL, u(domain), u(epoch)}));
    std::shuffle(episodes.begin(), episodes.end(), order.engine());

    double epoch_loss = 0;
    for (std::size_t start = 0; start < episodes.size(); start += static_cast<std::size_t>(tc.finetune_batch), ++it) {
      const std::size_t end = std::min(episodes.size(), start + static_cast<std::size_t>(tc.finetune_batch));
      const double n = static_cast<double>(end - start);
      const std::uint64_t before = nn::params_checksum(params);
      opt.zero_grad();
      for (std::size_t i = start; i < end; ++i) {
        const seg::HeadOutput out = model.predict(episodes[i].supports, episodes[i].query.image, Phase::kFinetune);
        const ag::Var loss = segmentation_loss(out.score, episodes[i].query.mask);
        check_finite(loss, "finetune ce");
        epoch_loss += loss.value()[0];
        ag::backward(ag::mul_scalar(loss, 1.0 / n));
      }
      opt.step();
      ++st.updates;
      if (hooks.updates) {
        UpdateRecord r;
        r.iteration = it;
        r.kind = UpdateKind::kFinetune;
        r.main_before = before;
        r.main_after = nn::params_checksum(params);
        r.backbone = nn::params_checksum(backbone);
        hooks.updates->push_back(r);
      }
    }
    epoch_loss /= static_cast<double>(episodes.size());
    st.epoch_loss.push_back(epoch_loss);
    if (hooks.metrics) {
      EpochRow row{epoch, "finetune_d" + std::to_string(domain), {}, {}};
      row.losses.ce = row.losses.total = epoch_loss;
      hooks.metrics->add(row);
    }
  }
  st.query_mask_accesses = target.query_mask_accesses();
  return st;
}

const AblationCell& AblationReport::cell(const std::string& table, const std::string& row) const {
  for (const AblationCell& c : cells) {
    if (c.table == table && c.row == row) return c;
  }
  throw std::out_of_range("no ablation cell " + table + "/" + row);
}

std::string AblationReport::markdown() const {
  std::ostringstream out;
  out.setf(std::ios::fixed);
  out.precision(2);
  const std::vector<std::pair<std::string, std::string>> titles = {
      {"module", "Module ablation"}, {"feature", "Feature ablation"}, {"loss", "Loss ablation"}};
  for (const auto& [table, title] : titles) {
    out << "### " << title << "\n\n| row |";
    for (int s : seeds) out << " seed " << s << " |";
    out << " mean mIoU |\n|---|";
    for (std::size_t i = 0; i < seeds.size(); ++i) out << "---|";
    out << "---|\n";
    for (const AblationCell& c : cells) {
      if (c.table != table) continue;
      out << "| " << c.row << " |";
      for (double v : c.per_seed) out << ' ' << 100 * v << " |";
      out << ' ' << 100 * c.mean << " |\n";
    }
    out << "\n";
  }
  return out.str();
}

std::string AblationReport::csv() const {
  std::string out = "table,row,seed,domain,miou\n";
  for (const AblationCell& c : cells) {
    for (std::size_t i = 0; i < c.per_seed.size(); ++i) {
      out += c.table + "," + c.row + "," + std::to_string(seeds[i]) + ",mean," + num(c.per_seed[i]) + "\n";
    }
    for (const auto& [d, v] : c.per_domain) out += c.table + "," + c.row + ",mean," + std::to_string(d) + "," + num(v) + "\n";
    out += c.table + "," + c.row + ",mean,mean," + num(c.mean) + "\n";
  }
  return out;
}

namespace {

struct Variant {
  std::string training;
  bool cam = false;
};

struct CellSpec {
  std::string table, row;
  Variant variant;  // training "baseline" is the pretrained model itself
};

std::vector<std::pair<std::string, AblationSwitches>> training_configs() {
  AblationSwitches mgdf_only;
  mgdf_only.use_acfd = mgdf_only.use_adv = mgdf_only.use_cont = mgdf_only.use_ortho = false;
  AblationSwitches full;
  AblationSwitches adv = full;
  adv.use_cont = adv.use_ortho = false;
  AblationSwitches cont = full;
  cont.use_adv = cont.use_ortho = false;
  AblationSwitches adv_cont = full;
  adv_cont.use_ortho = false;
  AblationSwitches base_only = full;
  base_only.use_private = base_only.use_shared = false;
  AblationSwitches priv_shared = full;
  priv_shared.use_base = false;
  return {{"mgdf", mgdf_only}, {"full", full},          {"adv", adv},           {"cont", cont},
          {"adv_cont", adv_cont}, {"base_only", base_only}, {"priv_shared", priv_shared}};
}

std::vector<CellSpec> cell_specs() {
  return {{"module", "baseline", {"baseline", false}},
          {"module", "+MGDF", {"mgdf", false}},
          {"module", "+MGDF+ACFD", {"full", false}},
          {"module", "+MGDF+ACFD+CAM", {"full", true}},
          {"feature", "base", {"base_only", true}},
          {"feature", "private+shared", {"priv_shared", true}},
          {"feature", "base+private+shared", {"full", true}},
          {"loss", "none", {"mgdf", true}},
          {"loss", "adv", {"adv", true}},
          {"loss", "cont", {"cont", true}},
          {"loss", "adv+cont", {"adv_cont", true}},
          {"loss", "adv+cont+ortho", {"full", true}}};
}

std::vector<Tensor> snapshot(DcdNet& model) {
  std::vector<Tensor> s;
  for (const auto& [name, params] : model.parameter_groups()) {
    if (name == "cam") continue;
    for (const nn::Parameter* p : params) s.push_back(p->value());
  }
  return s;
}

void restore(DcdNet& model, const std::vector<Tensor>& s) {
  model.drop_cam();
  std::size_t i = 0;
  for (const auto& [name, params] : model.parameter_groups()) {
    for (nn::Parameter* p : params) p->mutable_value() = s.at(i++);
  }
}

}  // namespace

AblationReport run_ablation_suite(const RunConfig& base, const ProgressFn& progress, DcdNet* given) {
  AblationReport report;
  const std::vector<CellSpec> specs = cell_specs();
  const std::vector<int> domains = base.target_domains();
  // cell index -> seed index -> domain -> miou
  std::vector<std::vector<std::map<int, double>>> results(specs.size());
  std::map<int, std::vector<double>> pre, post, one, five;
  auto say = [&progress](const std::string& s) {
    if (progress) progress(s);
  };

  for (int si = 0; si < base.ablation_seeds; ++si) {
    RunConfig cfg = base;
    cfg.train.seed = base.train.seed + static_cast<std::uint64_t>(si);
    cfg.model.init_seed = derive_seed(base.model.init_seed, {cfg.train.seed});
    report.seeds.push_back(static_cast<int>(cfg.train.seed));
    const DataSet data = make_dataset(cfg);
    std::unique_ptr<DcdNet> pretrained;
    if (given) {
      pretrained = from_pretrained(*given, [&cfg] {
        RunConfig b = cfg;
        b.switches = AblationSwitches::baseline();
        return b;
      }());
    } else {
      say("seed " + std::to_string(cfg.train.seed) + ": pretraining");
      pretrained = pretrain_baseline(cfg, data);
    }

    auto evaluate_variant = [&](DcdNet& model, bool cam, int shots, std::map<int, double>* pre_ft) {
      std::map<int, double> out;
      model.set_use_cam(cam);
      const std::vector<Tensor> snap = snapshot(model);
      for (int d : domains) {
        restore(model, snap);
        const SupportOnlySource target(data.domain(d));
        if (pre_ft) {
          model.reset_cam(derive_seed(cfg.train.seed, {0xca3ULL, static_cast<std::uint64_t>(d)}));
          (*pre_ft)[d] = evaluate_domain(model, data.domain(d), cfg.eval.episodes_per_domain, shots,
                                         cfg.eval.episode_seed)
                             .miou(cfg.eval.fg_only);
        }
        const FinetuneStats st = finetune_target(model, target, shots, cfg);
        if (st.query_mask_accesses != 0) throw ContractViolation("query masks were read during fine-tuning");
        out[d] = evaluate_domain(model, data.domain(d), cfg.eval.episodes_per_domain, shots, cfg.eval.episode_seed)
                     .miou(cfg.eval.fg_only);
      }
      restore(model, snap);
      return out;
    };

    for (std::size_t c = 0; c < specs.size(); ++c) {
      if (specs[c].variant.training == "baseline") results[c].push_back(evaluate_variant(*pretrained, false, cfg.shots, nullptr));
    }
    for (const auto& [name, sw] : training_configs()) {
      std::vector<std::size_t> users;
      for (std::size_t c = 0; c < specs.size(); ++c) {
        if (specs[c].variant.training == name) users.push_back(c);
      }
      if (users.empty()) continue;
      say("seed " + std::to_string(cfg.train.seed) + ": training " + name);
      RunConfig tcfg = cfg;
      tcfg.switches = sw;
      std::unique_ptr<DcdNet> model = from_pretrained(*pretrained, tcfg);
      train_dcdnet(*model, tcfg, data);
      std::map<bool, std::map<int, double>> by_cam;
      for (std::size_t c : users) {
        const bool cam = specs[c].variant.cam;
        if (!by_cam.count(cam)) {
          if (name == "full" && cam) {
            std::map<int, double> pre_ft;
            by_cam[cam] = evaluate_variant(*model, cam, cfg.shots, &pre_ft);
            for (int d : domains) {
              pre[d].push_back(pre_ft[d]);
              post[d].push_back(by_cam[cam][d]);
            }
            const auto one_shot = cfg.shots == 1 ? by_cam[cam] : evaluate_variant(*model, cam, 1, nullptr);
            const auto five_shot = cfg.shots == 5 ? by_cam[cam] : evaluate_variant(*model, cam, 5, nullptr);
            for (int d : domains) {
              one[d].push_back(one_shot.at(d));
              five[d].push_back(five_shot.at(d));
            }
          } else {
            by_cam[cam] = evaluate_variant(*model, cam, cfg.shots, nullptr);
          }
        }
        results[c].push_back(by_cam[cam]);
      }
    }
  }

  auto mean = [](const std::vector<double>& v) {
    double s = 0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
  };
  for (std::size_t c = 0; c < specs.size(); ++c) {
    AblationCell cell{specs[c].table, specs[c].row, {}, {}, 0};
    for (const auto& per_domain : results[c]) {
      double s = 0;
      for (int d : domains) s += per_domain.at(d);
      cell.per_seed.push_back(s / static_cast<double>(domains.size()));
    }
    for (int d : domains) {
      std::vector<double> v;
      for (const auto& per_domain : results[c]) v.push_back(per_domain.at(d));
      cell.per_domain[d] = mean(v);
    }
    cell.mean = mean(cell.per_seed);
    report.cells.push_back(std::move(cell));
  }
  for (int d : domains) {
    report.full_pre_finetune[d] = mean(pre[d]);
    report.full_post_finetune[d] = mean(post[d]);
    report.full_one_shot[d] = mean(one[d]);
    report.full_five_shot[d] = mean(five[d]);
  }
  return report;
}

}  // namespace dcdnet::train
