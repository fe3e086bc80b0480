#include "dcdnet/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <sstream>
#include <stdexcept>

#include "dcdnet/errors.hpp"

namespace dcdnet {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

double to_double(const std::string& v) {
  double out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw std::invalid_argument("not a number: '" + v + "'");
  return out;
}

long long to_integer(const std::string& v) {
  long long out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw std::invalid_argument("not an integer: '" + v + "'");
  return out;
}

bool to_bool(const std::string& v) {
  if (v == "1" || v == "true" || v == "on" || v == "yes") return true;
  if (v == "0" || v == "false" || v == "off" || v == "no") return false;
  throw std::invalid_argument("not a boolean: '" + v + "'");
}

std::string fmt(double v) {
  char buf[64];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

std::string fmt_list(const std::vector<int>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::vector<int> parse_list(const std::string& v) {
  std::vector<int> out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(static_cast<int>(to_integer(item)));
  }
  return out;
}

struct Field {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T>
Field number(std::string key, T RunConfig::*group, auto member) {
  return {key,
          [group, member](RunConfig& c, const std::string& v) {
            auto& slot = (c.*group).*member;
            using V = std::remove_reference_t<decltype(slot)>;
            if constexpr (std::is_same_v<V, bool>) {
              slot = to_bool(v);
            } else if constexpr (std::is_floating_point_v<V>) {
              slot = to_double(v);
            } else {
              slot = static_cast<V>(to_integer(v));
            }
          },
          [group, member](const RunConfig& c) {
            const auto& slot = (c.*group).*member;
            using V = std::remove_cvref_t<decltype(slot)>;
            if constexpr (std::is_same_v<V, bool>) {
              return std::string(slot ? "true" : "false");
            } else if constexpr (std::is_floating_point_v<V>) {
              return fmt(slot);
            } else {
              return std::to_string(slot);
            }
          }};
}

const std::vector<Field>& fields() {
  static const std::vector<Field> f = [] {
    std::vector<Field> v;
    v.push_back({"image_size",
                 [](RunConfig& c, const std::string& s) {
                   c.model.image_size = static_cast<int>(to_integer(s));
                   c.bench.image_size = c.model.image_size;
                 },
                 [](const RunConfig& c) { return std::to_string(c.model.image_size); }});
    v.push_back(number("c_shared", &RunConfig::model, &ModelConfig::c_shared));
    v.push_back(number("c_private", &RunConfig::model, &ModelConfig::c_private));
    v.push_back(number("c_f", &RunConfig::model, &ModelConfig::c_f));
    v.push_back(number("d_proj", &RunConfig::model, &ModelConfig::d_proj));
    v.push_back(number("ca_reduction", &RunConfig::model, &ModelConfig::ca_reduction));
    v.push_back(number("disc_hidden", &RunConfig::model, &ModelConfig::disc_hidden));
    v.push_back(number("disc_class_head", &RunConfig::model, &ModelConfig::disc_class_head));
    v.push_back(number("init_seed", &RunConfig::model, &ModelConfig::init_seed));

    v.push_back(number("source_classes", &RunConfig::bench, &data::BenchmarkConfig::source_classes));
    v.push_back(number("target_domains", &RunConfig::bench, &data::BenchmarkConfig::target_domains));
    v.push_back(number("classes_per_target", &RunConfig::bench, &data::BenchmarkConfig::classes_per_target));

    v.push_back(number("temperature", &RunConfig::head, &seg::HeadConfig::temperature));
    v.push_back(number("conf_hi", &RunConfig::head, &seg::HeadConfig::conf_hi));
    v.push_back(number("conf_lo", &RunConfig::head, &seg::HeadConfig::conf_lo));
    v.push_back(number("blend", &RunConfig::head, &seg::HeadConfig::blend));
    v.push_back(number("bfp_rounds", &RunConfig::head, &seg::HeadConfig::bfp_rounds));
    v.push_back(number("threshold", &RunConfig::head, &seg::HeadConfig::threshold));
    v.push_back(number("self_support", &RunConfig::head, &seg::HeadConfig::self_support));
    v.push_back(number("query_refine", &RunConfig::head, &seg::HeadConfig::query_refine));

    v.push_back(number("lambda_ce", &RunConfig::train, &TrainConfig::lambda_ce));
    v.push_back(number("lambda_adv", &RunConfig::train, &TrainConfig::lambda_adv));
    v.push_back(number("lambda_cont", &RunConfig::train, &TrainConfig::lambda_cont));
    v.push_back(number("lambda_ortho", &RunConfig::train, &TrainConfig::lambda_ortho));
    v.push_back(number("s_steps", &RunConfig::train, &TrainConfig::s_steps));
    v.push_back(number("d_steps", &RunConfig::train, &TrainConfig::d_steps));
    v.push_back(number("epochs", &RunConfig::train, &TrainConfig::epochs));
    v.push_back(number("episodes_per_epoch", &RunConfig::train, &TrainConfig::episodes_per_epoch));
    v.push_back(number("batch_size", &RunConfig::train, &TrainConfig::batch_size));
    v.push_back(number("lr_main", &RunConfig::train, &TrainConfig::lr_main));
    v.push_back(number("momentum", &RunConfig::train, &TrainConfig::momentum));
    v.push_back(number("lr_disc", &RunConfig::train, &TrainConfig::lr_disc));
    v.push_back(number("weight_decay_disc", &RunConfig::train, &TrainConfig::weight_decay_disc));
    v.push_back(number("lambda_grl", &RunConfig::train, &TrainConfig::lambda_grl));
    v.push_back(number("grl_warmup", &RunConfig::train, &TrainConfig::grl_warmup));
    v.push_back(number("tau", &RunConfig::train, &TrainConfig::tau));
    v.push_back(number("bank_capacity", &RunConfig::train, &TrainConfig::bank_capacity));
    v.push_back(number("max_fg_pixels", &RunConfig::train, &TrainConfig::max_fg_pixels));
    v.push_back(number("max_bg_pixels", &RunConfig::train, &TrainConfig::max_bg_pixels));
    v.push_back(number("pretrain_epochs", &RunConfig::train, &TrainConfig::pretrain_epochs));
    v.push_back(number("lr_pretrain", &RunConfig::train, &TrainConfig::lr_pretrain));
    v.push_back(number("finetune_epochs", &RunConfig::train, &TrainConfig::finetune_epochs));
    v.push_back(number("lr_finetune", &RunConfig::train, &TrainConfig::lr_finetune));
    v.push_back(number("finetune_batch", &RunConfig::train, &TrainConfig::finetune_batch));
    v.push_back(number("finetune_pool", &RunConfig::train, &TrainConfig::finetune_pool));
    v.push_back(number("seed", &RunConfig::train, &TrainConfig::seed));

    v.push_back(number("use_mgdf", &RunConfig::switches, &AblationSwitches::use_mgdf));
    v.push_back(number("use_acfd", &RunConfig::switches, &AblationSwitches::use_acfd));
    v.push_back(number("use_cam", &RunConfig::switches, &AblationSwitches::use_cam));
    v.push_back(number("use_base", &RunConfig::switches, &AblationSwitches::use_base));
    v.push_back(number("use_private", &RunConfig::switches, &AblationSwitches::use_private));
    v.push_back(number("use_shared", &RunConfig::switches, &AblationSwitches::use_shared));
    v.push_back(number("use_adv", &RunConfig::switches, &AblationSwitches::use_adv));
    v.push_back(number("use_cont", &RunConfig::switches, &AblationSwitches::use_cont));
    v.push_back(number("use_ortho", &RunConfig::switches, &AblationSwitches::use_ortho));

    v.push_back(number("eval_episodes", &RunConfig::eval, &EvalConfig::episodes_per_domain));
    v.push_back(number("monitor_episodes", &RunConfig::eval, &EvalConfig::monitor_episodes));
    v.push_back(number("eval_seed", &RunConfig::eval, &EvalConfig::episode_seed));
    v.push_back(number("fg_only", &RunConfig::eval, &EvalConfig::fg_only));

    v.push_back({"shots", [](RunConfig& c, const std::string& s) { c.shots = static_cast<int>(to_integer(s)); },
                 [](const RunConfig& c) { return std::to_string(c.shots); }});
    v.push_back({"domains", [](RunConfig& c, const std::string& s) { c.domains = parse_list(s); },
                 [](const RunConfig& c) { return fmt_list(c.domains); }});
    v.push_back({"ablation_seeds",
                 [](RunConfig& c, const std::string& s) { c.ablation_seeds = static_cast<int>(to_integer(s)); },
                 [](const RunConfig& c) { return std::to_string(c.ablation_seeds); }});
    v.push_back({"data_dir", [](RunConfig& c, const std::string& s) { c.data_dir = s; },
                 [](const RunConfig& c) { return c.data_dir; }});
    v.push_back({"run_name", [](RunConfig& c, const std::string& s) { c.run_name = s; },
                 [](const RunConfig& c) { return c.run_name; }});
    return v;
  }();
  return f;
}

}  // namespace

void TrainConfig::validate() const {
  auto need = [](bool ok, const char* what) {
    if (!ok) throw std::invalid_argument(what);
  };
  need(lambda_ce >= 0 && lambda_adv >= 0 && lambda_cont >= 0 && lambda_ortho >= 0, "loss weights must be >= 0");
  need(s_steps > 0 && d_steps > 0, "s_steps and d_steps must be positive");
  need(epochs > 0 && episodes_per_epoch > 0 && batch_size > 0, "epochs, episodes_per_epoch, batch_size must be positive");
  need(pretrain_epochs >= 0 && finetune_epochs >= 0, "epoch counts must be >= 0");
  need(lr_main > 0 && lr_disc > 0 && lr_finetune > 0 && lr_pretrain > 0, "learning rates must be positive");
  need(lambda_grl >= 0, "lambda_grl must be >= 0");
  need(tau > 0, "tau must be positive");
  need(bank_capacity > 0, "bank_capacity must be positive");
  need(finetune_batch > 0 && finetune_pool > 0, "finetune_batch and finetune_pool must be positive");
}

void RunConfig::set(const std::string& key, const std::string& value) {
  for (const Field& f : fields()) {
    if (f.key == key) {
      f.set(*this, value);
      return;
    }
  }
  throw std::invalid_argument("unknown key '" + key + "'");
}

std::vector<int> RunConfig::target_domains() const {
  if (!domains.empty()) return domains;
  std::vector<int> all;
  for (int d = 1; d <= bench.target_domains; ++d) all.push_back(d);
  return all;
}

void RunConfig::validate() const {
  train.validate();
  switches.validate();
  if (shots < 1) throw std::invalid_argument("shots must be >= 1");
  if (model.image_size <= 0 || model.image_size % 8 != 0) throw std::invalid_argument("image_size must be a positive multiple of 8");
  for (int d : domains) {
    if (d < 1 || d > bench.target_domains) throw std::invalid_argument("domain " + std::to_string(d) + " is not a target domain");
  }
  if (ablation_seeds < 1) throw std::invalid_argument("ablation_seeds must be >= 1");
}

std::vector<std::string> config_keys() {
  std::vector<std::string> k;
  for (const Field& f : fields()) k.push_back(f.key);
  return k;
}

RunConfig parse_config(const std::string& text, RunConfig base) {
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(lineno, "expected key = value, got '" + line + "'");
    try {
      base.set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const std::invalid_argument& e) {
      throw ConfigError(lineno, e.what());
    }
  }
  try {
    base.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(0, e.what());
  }
  return base;
}

RunConfig load_config(const std::filesystem::path& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw MissingArtifact("cannot read config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

void apply_override(RunConfig& cfg, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos) throw ConfigError(0, "override '" + assignment + "' is not key=value");
  try {
    cfg.set(trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
    cfg.validate();
  } catch (const std::invalid_argument& e) {
    throw ConfigError(0, "override '" + assignment + "': " + e.what());
  }
}

std::string resolved_config(const RunConfig& cfg) {
  std::string out;
  for (const Field& f : fields()) out += f.key + " = " + f.get(cfg) + "\n";
  return out;
}

}  // namespace dcdnet
