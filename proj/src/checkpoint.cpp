#include "dcdnet/checkpoint.hpp"

#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "dcdnet/errors.hpp"

namespace dcdnet {

namespace {

constexpr const char* kMagic = "DCDNET-CHECKPOINT";

struct StoredParam {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct StoredGroup {
  std::string name;
  std::vector<StoredParam> params;
};

struct StoredFile {
  std::string config_text;
  bool frozen = false;
  std::vector<StoredGroup> groups;
};

[[noreturn]] void malformed(const std::filesystem::path& path, const std::string& what) {
  throw std::runtime_error(path.string() + ": malformed checkpoint (" + what + ")");
}

StoredFile read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifact("checkpoint not found: " + path.string());
  StoredFile f;
  std::string line;
  std::getline(in, line);
  {
    std::istringstream hs(line);
    std::string magic;
    int version = 0;
    hs >> magic >> version;
    if (magic != kMagic) malformed(path, "bad magic");
    if (version != kCheckpointVersion) malformed(path, "unsupported version " + std::to_string(version));
  }
  std::getline(in, line);
  std::size_t config_bytes = 0;
  {
    std::istringstream hs(line);
    std::string tag;
    int frozen = 0;
    hs >> tag >> config_bytes >> frozen;
    if (tag != "config" || !hs) malformed(path, "config header");
    f.frozen = frozen != 0;
  }
  f.config_text.resize(config_bytes);
  in.read(f.config_text.data(), static_cast<std::streamsize>(config_bytes));
  std::size_t n_groups = 0;
  {
    std::getline(in, line);
    std::istringstream hs(line);
    std::string tag;
    hs >> tag >> n_groups;
    if (tag != "groups" || !hs) malformed(path, "group count");
  }
  for (std::size_t g = 0; g < n_groups; ++g) {
    std::getline(in, line);
    std::istringstream gs(line);
    std::string tag;
    StoredGroup group;
    std::size_t n_params = 0;
    gs >> tag >> group.name >> n_params;
    if (tag != "group" || !gs) malformed(path, "group header");
    for (std::size_t p = 0; p < n_params; ++p) {
      std::getline(in, line);
      std::istringstream ps(line);
      StoredParam param;
      int rank = 0;
      ps >> tag >> param.name >> rank;
      if (tag != "param" || !ps || rank < 0) malformed(path, "param header");
      param.shape.resize(static_cast<std::size_t>(rank));
      for (int& d : param.shape) ps >> d;
      if (!ps) malformed(path, "param shape");
      param.values.resize(shape_numel(param.shape));
      in.read(reinterpret_cast<char*>(param.values.data()),
              static_cast<std::streamsize>(param.values.size() * sizeof(double)));
      if (!in) malformed(path, "truncated values of " + param.name);
      in.get();  // newline after the payload
      group.params.push_back(std::move(param));
    }
    f.groups.push_back(std::move(group));
  }
  return f;
}

void apply(const StoredFile& f, DcdNet& model, const std::filesystem::path& path) {
  const auto groups = model.parameter_groups();
  if (groups.size() != f.groups.size()) {
    throw ShapeError(path.string() + ": checkpoint has " + std::to_string(f.groups.size()) + " groups, model has " +
                     std::to_string(groups.size()));
  }
  for (std::size_t g = 0; g < groups.size(); ++g) {
    const auto& [name, params] = groups[g];
    const StoredGroup& sg = f.groups[g];
    if (sg.name != name) throw ShapeError(path.string() + ": expected group " + name + ", found " + sg.name);
    if (sg.params.size() != params.size()) throw ShapeError(path.string() + ": group " + name + " parameter count");
    for (std::size_t p = 0; p < params.size(); ++p) {
      const StoredParam& sp = sg.params[p];
      if (sp.name != params[p]->name() || sp.shape != params[p]->value().shape()) {
        throw ShapeError(path.string() + ": " + sp.name + " " + shape_str(sp.shape) + " does not match " +
                         params[p]->name() + " " + shape_str(params[p]->value().shape()));
      }
    }
  }
  for (std::size_t g = 0; g < groups.size(); ++g) {
    for (std::size_t p = 0; p < groups[g].second.size(); ++p) {
      nn::Parameter* param = groups[g].second[p];
      param->mutable_value() = Tensor(param->value().shape(), f.groups[g].params[p].values);
    }
  }
  if (f.frozen) model.backbone().freeze();
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, DcdNet& model, const RunConfig& cfg) {
  const std::string config_text = resolved_config(cfg);
  std::filesystem::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + tmp.string());
    out << kMagic << ' ' << kCheckpointVersion << '\n';
    out << "config " << config_text.size() << ' ' << (model.backbone().frozen() ? 1 : 0) << '\n' << config_text;
    const auto groups = model.parameter_groups();
    out << "groups " << groups.size() << '\n';
    for (const auto& [name, params] : groups) {
      out << "group " << name << ' ' << params.size() << '\n';
      for (const nn::Parameter* p : params) {
        out << "param " << p->name() << ' ' << p->value().rank();
        for (int d : p->value().shape()) out << ' ' << d;
        out << '\n';
        out.write(reinterpret_cast<const char*>(p->value().data()),
                  static_cast<std::streamsize>(p->value().size() * sizeof(double)));
        out << '\n';
      }
    }
    if (!out) throw std::runtime_error("write failed for " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

LoadedCheckpoint load_checkpoint(const std::filesystem::path& path) {
  const StoredFile f = read_file(path);
  LoadedCheckpoint lc;
  lc.config = parse_config(f.config_text);
  lc.model = std::make_unique<DcdNet>(lc.config.model, lc.config.switches, lc.config.head);
  for (const StoredGroup& g : f.groups) lc.has_cam = lc.has_cam || g.name == "cam";
  if (lc.has_cam) lc.model->reset_cam(0);
  apply(f, *lc.model, path);
  return lc;
}

void load_parameters(const std::filesystem::path& path, DcdNet& model) { apply(read_file(path), model, path); }

}  // namespace dcdnet
