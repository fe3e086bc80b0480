#include "dcdnet/cli.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <chrono>
#include <cstdio>
#include <ctime>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>

#include "dcdnet/checkpoint.hpp"
#include "dcdnet/config.hpp"
#include "dcdnet/errors.hpp"
#include "dcdnet/self_check.hpp"
#include "dcdnet/train_pipeline.hpp"

namespace dcdnet::cli {

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

struct CommonFlags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<int> shots;
  std::string domains;
  std::string out = "runs";
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config, "key = value config file");
  cmd->add_option("--seed", f.seed, "training seed");
  cmd->add_option("--shots", f.shots, "support shots")->check(CLI::IsMember({1, 5}));
  cmd->add_option("--domains", f.domains, "comma-separated target domain ids");
  cmd->add_option("--out", f.out, "output root");
  cmd->add_option("--override", f.overrides, "key=value, repeatable")->allow_extra_args(false);
}

RunConfig resolve(const CommonFlags& f) {
  RunConfig cfg = f.config.empty() ? RunConfig{} : load_config(f.config);
  for (const std::string& o : f.overrides) apply_override(cfg, o);
  if (f.seed) apply_override(cfg, "seed=" + std::to_string(*f.seed));
  if (f.shots) apply_override(cfg, "shots=" + std::to_string(*f.shots));
  if (!f.domains.empty()) apply_override(cfg, "domains=" + f.domains);
  return cfg;
}

std::string timestamp() {
  const std::time_t now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&now, &tm);
  std::ostringstream s;
  s << std::put_time(&tm, "%Y%m%d-%H%M%S");
  return s.str();
}

// Output directory of one command, held under a lock file.
class RunDir {
 public:
  RunDir(const std::string& root, const std::string& command, const RunConfig& cfg) {
    const std::string name =
        cfg.run_name.empty() ? timestamp() + "-s" + std::to_string(cfg.train.seed) : cfg.run_name;
    path_ = fs::path(root) / (command + "-" + name);
    fs::create_directories(path_);
    lock_ = path_ / ".lock";
    std::FILE* f = std::fopen(lock_.c_str(), "wx");
    if (!f) throw ConfigError(0, "run directory " + path_.string() + " is locked by another writer");
    std::fclose(f);
    write("config.resolved", resolved_config(cfg));
  }
  ~RunDir() {
    std::error_code ec;
    fs::remove(lock_, ec);
  }
  RunDir(const RunDir&) = delete;
  RunDir& operator=(const RunDir&) = delete;

  const fs::path& path() const { return path_; }
  void write(const std::string& file, const std::string& text) const {
    std::ofstream out(path_ / file, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + (path_ / file).string());
    out << text;
  }
  void write_json(const ordered_json& j) const { write("summary.json", j.dump(2) + "\n"); }

 private:
  fs::path path_, lock_;
};

std::string pct(double v) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(2) << 100 * v;
  return s.str();
}

ordered_json losses_json(const train::LossBundle& l) {
  return {{"ce", l.ce},       {"adv", l.adv},         {"cont", l.cont},         {"ortho", l.ortho},
          {"disc", l.disc},   {"disc_real", l.disc_real}, {"disc_fake", l.disc_fake}, {"total", l.total}};
}

LoadedCheckpoint require_checkpoint(const std::string& path) {
  if (path.empty()) throw MissingArtifact("a --checkpoint is required");
  return load_checkpoint(path);
}

// Model and training settings come from the checkpoint; run-level settings
// (schedule, shots, domains, evaluation) from the command line.
RunConfig merge(const RunConfig& from_ckpt, const RunConfig& cli) {
  RunConfig cfg = cli;
  cfg.model = from_ckpt.model;
  cfg.switches = from_ckpt.switches;
  cfg.bench = from_ckpt.bench;
  return cfg;
}

int cmd_export(const CommonFlags& f, int scenes_per_class, std::ostream& out) {
  const RunConfig cfg = resolve(f);
  const fs::path root = cfg.data_dir.empty() ? fs::path(f.out) / "data" : fs::path(cfg.data_dir);
  for (const data::DomainSpec& spec : data::make_benchmark(cfg.bench)) {
    const fs::path dir = data::export_domain(spec, root, scenes_per_class, derive_seed(cfg.train.seed, {0xe8ULL}));
    out << "domain " << spec.domain_id << " -> " << dir.string() << "\n";
  }
  return kOk;
}

int cmd_pretrain(const CommonFlags& f, std::ostream& out) {
  RunConfig cfg = resolve(f);
  RunDir dir(f.out, "pretrain", cfg);
  const train::DataSet data = train::make_dataset(cfg);
  train::MetricsLog metrics;
  train::PhaseHooks hooks;
  hooks.metrics = &metrics;
  hooks.monitor = &data;
  std::unique_ptr<DcdNet> model = train::pretrain_baseline(cfg, data, hooks);
  RunConfig saved = cfg;
  saved.switches = AblationSwitches::baseline();
  save_checkpoint(dir.path() / "baseline.ckpt", *model, saved);
  metrics.write_csv(dir.path() / "metrics.csv");
  ordered_json j{{"command", "pretrain"}, {"seed", cfg.train.seed}, {"checkpoint", "baseline.ckpt"}};
  if (!metrics.rows().empty()) j["final"] = losses_json(metrics.rows().back().losses);
  dir.write_json(j);
  out << dir.path().string() << "\n";
  return kOk;
}

int cmd_train(const CommonFlags& f, const std::string& ckpt, std::ostream& out) {
  const RunConfig cli = resolve(f);
  LoadedCheckpoint pre = require_checkpoint(ckpt);
  RunConfig cfg = cli;
  cfg.model = pre.config.model;
  cfg.bench = pre.config.bench;
  RunDir dir(f.out, "train", cfg);
  const train::DataSet data = train::make_dataset(cfg);
  std::unique_ptr<DcdNet> model = train::from_pretrained(*pre.model, cfg);
  train::MetricsLog metrics;
  train::UpdateLog updates;
  train::PhaseHooks hooks;
  hooks.metrics = &metrics;
  hooks.updates = &updates;
  hooks.monitor = &data;
  hooks.on_epoch = [&](int, DcdNet& m) { save_checkpoint(dir.path() / "model.ckpt", m, cfg); };
  const train::TrainStats st = train::train_dcdnet(*model, cfg, data, hooks);
  save_checkpoint(dir.path() / "model.ckpt", *model, cfg);
  metrics.write_csv(dir.path() / "metrics.csv");
  std::string log = "iteration,kind,main_before,main_after,disc_before,disc_after,backbone\n";
  for (const train::UpdateRecord& r : updates) {
    log += std::to_string(r.iteration) + "," + train::update_kind_name(r.kind) + "," + std::to_string(r.main_before) +
           "," + std::to_string(r.main_after) + "," + std::to_string(r.disc_before) + "," +
           std::to_string(r.disc_after) + "," + std::to_string(r.backbone) + "\n";
  }
  dir.write("updates.csv", log);
  ordered_json j{{"command", "train"},
                 {"seed", cfg.train.seed},
                 {"iterations", st.iterations},
                 {"no_pair_steps", st.no_pair_steps},
                 {"cross_correlation", {{"initial", st.initial_cross_correlation}, {"final", st.final_cross_correlation}}},
                 {"checkpoint", "model.ckpt"}};
  if (!metrics.rows().empty()) j["final"] = losses_json(metrics.rows().back().losses);
  dir.write_json(j);
  out << dir.path().string() << "\n";
  return kOk;
}

void print_table(std::ostream& out, const std::vector<int>& domains, const std::map<int, double>& one,
                 const std::map<int, double>& five, const std::string& title) {
  out << title << "\n| domain | 1-shot mIoU | 5-shot mIoU |\n|---|---|---|\n";
  double s1 = 0, s5 = 0;
  for (int d : domains) {
    out << "| " << d << " | " << pct(one.at(d)) << " | " << pct(five.at(d)) << " |\n";
    s1 += one.at(d);
    s5 += five.at(d);
  }
  const double n = static_cast<double>(domains.size());
  out << "| mean | " << pct(s1 / n) << " | " << pct(s5 / n) << " |\n";
}

int cmd_finetune(const CommonFlags& f, const std::string& ckpt, std::ostream& out) {
  const RunConfig cli = resolve(f);
  LoadedCheckpoint src = require_checkpoint(ckpt);
  const RunConfig cfg = merge(src.config, cli);
  RunDir dir(f.out, "finetune", cfg);
  const train::DataSet data = train::make_dataset(cfg);
  train::MetricsLog metrics;
  train::PhaseHooks hooks;
  hooks.metrics = &metrics;
  ordered_json j{{"command", "finetune"}, {"seed", cfg.train.seed}, {"shots", cfg.shots}, {"domains", ordered_json::array()}};
  out << "| domain | pre mIoU | post mIoU |\n|---|---|---|\n";
  std::vector<train::DomainEval> evals;
  for (int d : cfg.target_domains()) {
    LoadedCheckpoint fresh = load_checkpoint(ckpt);
    DcdNet& model = *fresh.model;
    model.reset_cam(derive_seed(cfg.train.seed, {0xca3ULL, static_cast<std::uint64_t>(d)}));
    const double pre = train::evaluate_domain(model, data.domain(d), cfg.eval.episodes_per_domain, cfg.shots,
                                              cfg.eval.episode_seed)
                           .miou(cfg.eval.fg_only);
    const train::SupportOnlySource target(data.domain(d));
    const train::FinetuneStats st = train::finetune_target(model, target, cfg.shots, cfg, hooks);
    evals.push_back(
        train::evaluate_domain(model, data.domain(d), cfg.eval.episodes_per_domain, cfg.shots, cfg.eval.episode_seed));
    const double post = evals.back().miou(cfg.eval.fg_only);
    const std::string name = "finetuned_d" + std::to_string(d) + ".ckpt";
    save_checkpoint(dir.path() / name, model, cfg);
    out << "| " << d << " | " << pct(pre) << " | " << pct(post) << " |\n";
    j["domains"].push_back({{"domain", d},
                            {"pre_miou", pre},
                            {"post_miou", post},
                            {"updates", st.updates},
                            {"query_mask_accesses", st.query_mask_accesses},
                            {"checkpoint", name}});
  }
  metrics.write_csv(dir.path() / "metrics.csv");
  dir.write("episodes.csv", train::episode_csv(evals));
  dir.write_json(j);
  out << dir.path().string() << "\n";
  return kOk;
}

int cmd_eval(const CommonFlags& f, const std::string& ckpt, std::ostream& out) {
  const RunConfig cli = resolve(f);
  std::unique_ptr<DcdNet> model;
  RunConfig cfg = cli;
  if (ckpt.empty()) {
    model = std::make_unique<DcdNet>(cfg.model, cfg.switches, cfg.head);
  } else {
    LoadedCheckpoint c = load_checkpoint(ckpt);
    cfg = merge(c.config, cli);
    model = std::move(c.model);
  }
  model->set_head_config(cfg.head);
  RunDir dir(f.out, "eval", cfg);
  const train::DataSet data = train::make_dataset(cfg);
  std::map<int, double> miou[2];
  ordered_json j{{"command", "eval"}, {"checkpoint", ckpt.empty() ? "untrained" : ckpt}, {"domains", ordered_json::array()}};
  const std::vector<int> domains = cfg.target_domains();
  for (int si = 0; si < 2; ++si) {
    const int shots = si == 0 ? 1 : 5;
    std::vector<train::DomainEval> evals;
    for (int d : domains) {
      evals.push_back(
          train::evaluate_domain(*model, data.domain(d), cfg.eval.episodes_per_domain, shots, cfg.eval.episode_seed));
      miou[si][d] = evals.back().miou(cfg.eval.fg_only);
    }
    dir.write("episodes_" + std::to_string(shots) + "shot.csv", train::episode_csv(evals));
  }
  for (int d : domains) j["domains"].push_back({{"domain", d}, {"miou_1shot", miou[0][d]}, {"miou_5shot", miou[1][d]}});
  dir.write_json(j);
  print_table(out, domains, miou[0], miou[1], "Target mIoU (%)");
  out << dir.path().string() << "\n";
  return kOk;
}

int cmd_ablate(const CommonFlags& f, const std::string& ckpt, bool from_scratch, std::ostream& out,
               std::ostream& err) {
  const RunConfig cli = resolve(f);
  if (ckpt.empty() && !from_scratch) throw MissingArtifact("ablate needs --checkpoint or --from-scratch");
  std::optional<LoadedCheckpoint> pre;
  RunConfig cfg = cli;
  if (!ckpt.empty()) {
    pre = load_checkpoint(ckpt);
    cfg.model = pre->config.model;
    cfg.bench = pre->config.bench;
  }
  RunDir dir(f.out, "ablate", cfg);
  const train::AblationReport report = train::run_ablation_suite(
      cfg, [&err](const std::string& s) { err << s << "\n"; }, pre ? pre->model.get() : nullptr);
  dir.write("ablation.md", report.markdown());
  dir.write("ablation.csv", report.csv());
  ordered_json j{{"command", "ablate"}, {"seeds", report.seeds}, {"cells", ordered_json::array()}};
  for (const train::AblationCell& c : report.cells) {
    j["cells"].push_back({{"table", c.table}, {"row", c.row}, {"per_seed", c.per_seed}, {"mean", c.mean}});
  }
  auto domain_map = [](const std::map<int, double>& m) {
    ordered_json o = ordered_json::object();
    for (const auto& [d, v] : m) o[std::to_string(d)] = v;
    return o;
  };
  j["full_pre_finetune"] = domain_map(report.full_pre_finetune);
  j["full_post_finetune"] = domain_map(report.full_post_finetune);
  j["full_1shot"] = domain_map(report.full_one_shot);
  j["full_5shot"] = domain_map(report.full_five_shot);
  dir.write_json(j);
  out << report.markdown() << dir.path().string() << "\n";
  return kOk;
}

int cmd_check(bool corrupt_grl, std::ostream& out) {
  const auto start = std::chrono::steady_clock::now();
  const std::vector<check::CheckResult> results = check::run_self_check(corrupt_grl);
  for (const check::CheckResult& r : results) {
    out << (r.passed ? "PASS " : "FAIL ") << r.name << " (" << r.detail << ")\n";
  }
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  out << "elapsed " << std::fixed << std::setprecision(2) << secs << " s\n";
  return check::all_passed(results) ? kOk : kCheckFailed;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Cross-domain few-shot segmentation with decomposed features"};
  app.require_subcommand(1);
  CommonFlags flags;
  std::string ckpt;
  int scenes_per_class = 20;
  bool from_scratch = false, corrupt_grl = false;

  CLI::App* exp = app.add_subcommand("export", "write the synthetic benchmark to disk");
  add_common(exp, flags);
  exp->add_option("--scenes-per-class", scenes_per_class)->check(CLI::PositiveNumber);
  CLI::App* pre = app.add_subcommand("pretrain", "train the baseline backbone on the source domain");
  add_common(pre, flags);
  CLI::App* trn = app.add_subcommand("train", "source training with decomposition and fusion");
  add_common(trn, flags);
  trn->add_option("--checkpoint", ckpt, "pretrained baseline checkpoint");
  CLI::App* ft = app.add_subcommand("finetune", "support-only adaptation to each target domain");
  add_common(ft, flags);
  ft->add_option("--checkpoint", ckpt, "source-trained checkpoint");
  CLI::App* ev = app.add_subcommand("eval", "1-shot and 5-shot target mIoU");
  add_common(ev, flags);
  ev->add_option("--checkpoint", ckpt, "model checkpoint (untrained model if omitted)");
  CLI::App* abl = app.add_subcommand("ablate", "module, feature and loss ablation tables");
  add_common(abl, flags);
  abl->add_option("--checkpoint", ckpt, "pretrained baseline checkpoint");
  abl->add_flag("--from-scratch", from_scratch, "pretrain a baseline per seed");
  CLI::App* chk = app.add_subcommand("check", "numerical invariant suite");
  chk->add_flag("--corrupt-grl", corrupt_grl, "test hook: flip the gradient reversal sign");

  std::vector<std::string> argv(args.rbegin(), args.rend() - 1);
  try {
    app.parse(argv);
  } catch (const CLI::ParseError& e) {
    std::ostringstream o, e2;
    const int code = app.exit(e, o, e2);
    out << o.str();
    err << e2.str();
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*exp) return cmd_export(flags, scenes_per_class, out);
    if (*pre) return cmd_pretrain(flags, out);
    if (*trn) return cmd_train(flags, ckpt, out);
    if (*ft) return cmd_finetune(flags, ckpt, out);
    if (*ev) return cmd_eval(flags, ckpt, out);
    if (*abl) return cmd_ablate(flags, ckpt, from_scratch, out, err);
    if (*chk) return cmd_check(corrupt_grl, out);
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const MissingArtifact& e) {
    err << "missing artifact: " << e.what() << "\n";
    return kMissingArtifact;
  } catch (const NumericalAbort& e) {
    err << "numerical abort in " << e.component() << ": " << e.what() << "\n";
    return kNumericalAbort;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kConfigError;
  }
  return kOk;
}

}  // namespace dcdnet::cli
