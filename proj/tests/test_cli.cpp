// SPDX-License-Identifier: Apache-2.0
#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <random>
#include <sstream>

#include "doctest.h"
#include "rfp/checkpoint.hpp"
#include "rfp/trainer.hpp"

using namespace rfp;
namespace fs = std::filesystem;

namespace {

const fs::path& work_dir() {
  static const fs::path dir = [] {
    auto d = fs::temp_directory_path() / ("rfp_cli_" + std::to_string(std::random_device{}()));
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

struct Run {
  int code = -1;
  std::string out;
};

Run run(const std::string& args) {
  const fs::path log = work_dir() / "last.log";
  const std::string cmd = std::string(RFP_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  Run r;
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  std::ifstream in(log);
  std::stringstream ss;
  ss << in.rdbuf();
  r.out = ss.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// Small enough that train/eval take well under a second.
const std::vector<std::string> kTiny = {
    "data.image_size=64", "data.max_size=40", "data.train_images=4", "data.test_images=3",
    "fpn.out_channels=8", "backbone.stage_channels=8,8,8,8", "backbone.stem_channels=4", "train.batch=2"};

std::string tiny_flags(const std::vector<std::string>& extra = {}) {
  std::string s;
  for (const auto& kv : kTiny) s += " -s " + kv;
  for (const auto& kv : extra) s += " -s " + kv;
  return s;
}

std::string out_dir(const std::string& name) { return (work_dir() / name).string(); }

}  // namespace

TEST_CASE("version and help") {
  auto r = run("--version");
  CHECK(r.code == 0);
  CHECK(r.out.find(code_version()) != std::string::npos);
  CHECK(run("nosuchverb").code != 0);
}

TEST_CASE("exit codes for configuration and I/O errors") {
  auto bad_key = run("cost -s rfp.brnches=2");
  CHECK(bad_key.code == 2);
  CHECK(bad_key.out.find("rfp.brnches") != std::string::npos);
  auto bad_value = run("cost -s rfp.fusion=max");
  CHECK(bad_value.code == 2);
  CHECK(bad_value.out.find("rfp.fusion") != std::string::npos);
  CHECK(run("cost -c /nonexistent/file.cfg").code == 4);
  CHECK(run("eval --checkpoint /nonexistent/ckpt.bin").code == 4);
}

TEST_CASE("cost tables at published width") {
  auto r = run("cost -c " RFP_SOURCE_DIR "/configs/resnet50_fpn.cfg --input 960x1024 --axis branches");
  CHECK(r.code == 0);
  CHECK(r.out.find("not a multiple of 128") != std::string::npos);
  CHECK(r.out.find("config_hash") != std::string::npos);
  auto plain = run("cost -c " RFP_SOURCE_DIR "/configs/resnet50_fpn.cfg --input 1024x1024 --axis none");
  CHECK(plain.code == 0);
  CHECK(plain.out.find("not a multiple") == std::string::npos);
}

TEST_CASE("train with zero steps reproduces the fresh model's AP") {
  const std::string dir = out_dir("zero");
  REQUIRE(run("train" + tiny_flags({"train.steps=0"}) + " -o " + dir).code == 0);
  REQUIRE(run("eval --checkpoint " + dir + "/checkpoint.bin -o " + dir + "/eval").code == 0);
  auto metrics = nlohmann::json::parse(slurp(dir + "/eval/metrics.json"));

  FlatConfig flat = FlatConfig::parse("");
  for (const auto& kv : kTiny) {
    auto eq = kv.find('=');
    flat.set(kv.substr(0, eq), kv.substr(eq + 1));
  }
  flat.set("train.steps", "0");
  auto cfg = ExperimentConfig::from_flat(flat);
  Detector fresh(cfg.model, cfg.train.seed);
  auto expected = evaluate(fresh, load_splits(cfg).test);
  CHECK(metrics["ap50"].get<double>() == expected.ap.ap);
  CHECK(metrics["true_positives"].get<int>() == expected.ap.true_positives);
  CHECK(metrics["config"].get<std::string>() == cfg.flat.to_text());
}

TEST_CASE("identical runs write identical files") {
  const std::string a = out_dir("det_a"), b = out_dir("det_b");
  for (const auto& d : {a, b}) {
    REQUIRE(run("train" + tiny_flags({"train.steps=3"}) + " -o " + d).code == 0);
    REQUIRE(run("eval --checkpoint " + d + "/checkpoint.bin -o " + d + "/eval").code == 0);
  }
  CHECK(slurp(a + "/checkpoint.bin") == slurp(b + "/checkpoint.bin"));
  CHECK(slurp(a + "/train_log.txt") == slurp(b + "/train_log.txt"));
  // metrics embed the checkpoint path, so compare everything else
  auto ma = nlohmann::json::parse(slurp(a + "/eval/metrics.json"));
  auto mb = nlohmann::json::parse(slurp(b + "/eval/metrics.json"));
  ma.erase("checkpoint");
  mb.erase("checkpoint");
  CHECK(ma == mb);
  CHECK(slurp(a + "/eval/pr_curve.csv") == slurp(b + "/eval/pr_curve.csv"));
  CHECK(slurp(a + "/eval/detections.txt") == slurp(b + "/eval/detections.txt"));
}

TEST_CASE("resume continues a run exactly") {
  // without warmup or a drop the 2-step schedule is a prefix of the 4-step one
  const std::vector<std::string> flat_lr{"train.warmup_steps=0", "train.lr_drop_at=1"};
  auto with = [&](const std::string& steps) {
    auto v = flat_lr;
    v.push_back("train.steps=" + steps);
    return tiny_flags(v);
  };
  const std::string whole = out_dir("whole"), part = out_dir("part"), rest = out_dir("rest");
  REQUIRE(run("train" + with("4") + " -o " + whole).code == 0);
  REQUIRE(run("train" + with("2") + " -o " + part).code == 0);
  REQUIRE(run("train" + with("4") + " -o " + rest + " --resume " + part + "/checkpoint.bin").code == 0);
  auto a = read_checkpoint(whole + "/checkpoint.bin"), b = read_checkpoint(rest + "/checkpoint.bin");
  CHECK(a.step == 4);
  CHECK(b.step == 4);
  REQUIRE(a.entries.size() == b.entries.size());
  for (size_t i = 0; i < a.entries.size(); ++i) CHECK(a.entries[i].values == b.entries[i].values);
}

TEST_CASE("eval refuses a checkpoint from another architecture") {
  const std::string dir = out_dir("arch");
  REQUIRE(run("train" + tiny_flags({"train.steps=0"}) + " -o " + dir).code == 0);
  auto ckpt = read_checkpoint(dir + "/checkpoint.bin");
  auto r = run("eval --checkpoint " + dir + "/checkpoint.bin -s rfp.fusion=add");
  CHECK(r.code == 2);
  CHECK(r.out.find(format_hash(ckpt.arch_hash)) != std::string::npos);
}

TEST_CASE("fold: branch pool only, reports the MAC reduction") {
  const std::string pool = out_dir("pool"), add = out_dir("add");
  REQUIRE(run("train" + tiny_flags({"train.steps=1"}) + " -o " + pool).code == 0);
  REQUIRE(run("fold --checkpoint " + pool + "/checkpoint.bin -o " + pool + "/folded.bin").code == 0);
  auto folded = read_checkpoint(pool + "/folded.bin");
  CHECK(folded.config_text.find("rfp.inference = single:2") != std::string::npos);
  REQUIRE(run("eval --checkpoint " + pool + "/folded.bin -o " + pool + "/eval").code == 0);
  auto m = nlohmann::json::parse(slurp(pool + "/eval/metrics.json"));
  CHECK(m["mac_ratio_vs_unfolded"].get<double>() < 1.0);
  CHECK(m["inference"].get<std::string>() == "single:2");

  REQUIRE(run("train" + tiny_flags({"train.steps=0", "rfp.fusion=add"}) + " -o " + add).code == 0);
  auto refused = run("fold --checkpoint " + add + "/checkpoint.bin -o " + add + "/folded.bin");
  CHECK(refused.code == 2);
  CHECK(refused.out.find("add") != std::string::npos);
  CHECK_FALSE(fs::exists(add + "/folded.bin"));
  CHECK(run("fold --checkpoint " + pool + "/checkpoint.bin --branch 4 -o " + pool + "/bad.bin").code == 2);
}

TEST_CASE("gradcheck and datagen verbs") {
  auto g = run("gradcheck --seeds 3 --model-seeds 1 --families conv2d");
  CHECK(g.code == 0);
  const std::string dir = out_dir("data");
  REQUIRE(run("datagen" + tiny_flags() + " -o " + dir).code == 0);
  CHECK(fs::exists(dir + "/train/annotations.csv"));
  CHECK(fs::exists(dir + "/test/images.txt"));
  // training from the written directory matches training on the generated stream
  const std::string from_disk = out_dir("disk"), in_memory = out_dir("mem");
  REQUIRE(run("train" + tiny_flags({"train.steps=2", "data.dir=" + dir}) + " -o " + from_disk).code == 0);
  REQUIRE(run("train" + tiny_flags({"train.steps=2"}) + " -o " + in_memory).code == 0);
  auto a = read_checkpoint(from_disk + "/checkpoint.bin"), b = read_checkpoint(in_memory + "/checkpoint.bin");
  REQUIRE(a.entries.size() == b.entries.size());
  for (size_t i = 0; i < a.entries.size(); ++i) CHECK(a.entries[i].values == b.entries[i].values);
}

TEST_CASE("ablate prints every axis") {
  auto r = run("ablate --axis all");
  CHECK(r.code == 0);
  CHECK(r.out.find("ablation: branches") != std::string::npos);
  CHECK(r.out.find("ablation: sharing") != std::string::npos);
  CHECK(r.out.find("ablation: fusion") != std::string::npos);
  fs::remove_all(work_dir());
}
