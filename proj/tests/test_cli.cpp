#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <sstream>

#include "dcdnet/cli.hpp"

namespace fs = std::filesystem;

namespace {

struct Result {
  int code;
  std::string out, err;
};

Result run(std::vector<std::string> args) {
  args.insert(args.begin(), "dcdnet");
  std::ostringstream out, err;
  const int code = dcdnet::cli::run(args, out, err);
  return {code, out.str(), err.str()};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream s;
  s << in.rdbuf();
  return s.str();
}

const std::vector<std::string> kTiny = {
    "--override", "image_size=32",   "--override", "c_shared=8",           "--override", "c_private=16",
    "--override", "c_f=16",          "--override", "d_proj=8",             "--override", "episodes_per_epoch=8",
    "--override", "batch_size=4",    "--override", "epochs=1",             "--override", "pretrain_epochs=1",
    "--override", "finetune_epochs=1", "--override", "finetune_pool=1",    "--override", "eval_episodes=2",
    "--override", "monitor_episodes=1", "--override", "ablation_seeds=1"};

std::vector<std::string> with(std::vector<std::string> head, const fs::path& out, const std::string& name) {
  head.insert(head.end(), kTiny.begin(), kTiny.end());
  head.insert(head.end(), {"--out", out.string(), "--override", "run_name=" + name});
  return head;
}

fs::path scratch() {
  const fs::path p = fs::temp_directory_path() / "dcdnet_cli_test";
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("check command and its corruption hook") {
  CHECK(run({"check"}).code == 0);
  const Result bad = run({"check", "--corrupt-grl"});
  CHECK(bad.code == 4);
  CHECK(bad.out.find("FAIL grl") != std::string::npos);
}

TEST_CASE("exit codes for bad input") {
  const fs::path dir = scratch();
  std::ofstream(dir / "bad.cfg") << "shots = 1\nwhat = 2\n";
  const Result cfg = run({"eval", "--config", (dir / "bad.cfg").string(), "--out", dir.string()});
  CHECK(cfg.code == 1);
  CHECK(cfg.err.find("line 2") != std::string::npos);
  CHECK(run({"finetune", "--out", dir.string()}).code == 2);
  CHECK(run({"finetune", "--checkpoint", (dir / "missing.ckpt").string(), "--out", dir.string()}).code == 2);
  CHECK(run({"ablate", "--out", dir.string()}).code == 2);
  CHECK(run({"eval", "--shots", "3"}).code == 1);
  CHECK(run({"train", "--out", dir.string()}).code == 2);
}

TEST_CASE("pipeline commands write their artifacts") {
  const fs::path dir = scratch();
  REQUIRE(run(with({"pretrain"}, dir, "p")).code == 0);
  const fs::path base = dir / "pretrain-p" / "baseline.ckpt";
  REQUIRE(fs::exists(base));
  CHECK(fs::exists(dir / "pretrain-p" / "config.resolved"));
  CHECK_FALSE(fs::exists(dir / "pretrain-p" / ".lock"));

  const Result nan = run(with({"train", "--checkpoint", base.string(), "--override", "lambda_ortho=1e308"}, dir, "n"));
  CHECK(nan.code == 3);
  CHECK(nan.err.find("numerical abort") != std::string::npos);

  REQUIRE(run(with({"train", "--checkpoint", base.string()}, dir, "t1")).code == 0);
  REQUIRE(run(with({"train", "--checkpoint", base.string()}, dir, "t2")).code == 0);
  const std::string a = slurp(dir / "train-t1" / "metrics.csv");
  CHECK_FALSE(a.empty());
  CHECK(a == slurp(dir / "train-t2" / "metrics.csv"));
  CHECK(slurp(dir / "train-t1" / "updates.csv") == slurp(dir / "train-t2" / "updates.csv"));

  const fs::path model = dir / "train-t1" / "model.ckpt";
  const Result ft = run(with({"finetune", "--checkpoint", model.string(), "--domains", "1"}, dir, "f"));
  REQUIRE(ft.code == 0);
  CHECK(fs::exists(dir / "finetune-f" / "finetuned_d1.ckpt"));

  const Result ev = run(with({"eval", "--checkpoint", (dir / "finetune-f" / "finetuned_d1.ckpt").string()}, dir, "e"));
  REQUIRE(ev.code == 0);
  CHECK(ev.out.find("1-shot mIoU | 5-shot mIoU") != std::string::npos);
  CHECK(fs::exists(dir / "eval-e" / "episodes_5shot.csv"));
  CHECK(slurp(dir / "eval-e" / "summary.json").find("miou_5shot") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("eval on an untrained model") {
  const fs::path dir = scratch();
  const Result ev = run(with({"eval"}, dir, "u"));
  CHECK(ev.code == 0);
  CHECK(ev.out.find("| mean |") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("a locked run directory is refused") {
  const fs::path dir = scratch();
  fs::create_directories(dir / "eval-l");
  std::ofstream(dir / "eval-l" / ".lock") << "";
  CHECK(run(with({"eval"}, dir, "l")).code == 1);
  fs::remove_all(dir);
}

TEST_CASE("ablate emits three tables with a seeds column") {
  const fs::path dir = scratch();
  const Result r = run(with({"ablate", "--from-scratch", "--domains", "1", "--override", "eval_episodes=1"}, dir, "a"));
  REQUIRE(r.code == 0);
  const std::string md = slurp(dir / "ablate-a" / "ablation.md");
  CHECK(md.find("Module ablation") != std::string::npos);
  CHECK(md.find("Feature ablation") != std::string::npos);
  CHECK(md.find("Loss ablation") != std::string::npos);
  CHECK(md.find("seed 0") != std::string::npos);
  const std::string csv = slurp(dir / "ablate-a" / "ablation.csv");
  CHECK(csv.rfind("table,row,seed,domain,miou\n", 0) == 0);
  fs::remove_all(dir);
}
