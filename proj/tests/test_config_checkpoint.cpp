// SPDX-License-Identifier: Apache-2.0
#include <cstring>
#include <filesystem>
#include <fstream>
#include <random>
#include <sstream>

#include "doctest.h"
#include "rfp/checkpoint.hpp"
#include "rfp/config.hpp"
#include "rfp/detector.hpp"
#include "rfp/errors.hpp"
#include "rfp/trainer.hpp"
#include "test_util.hpp"

using namespace rfp;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  TempDir() {
    path = fs::temp_directory_path() / ("rfp_ckpt_" + std::to_string(std::random_device{}()));
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

std::string config_error(const std::string& text) {
  try {
    ExperimentConfig::from_flat(FlatConfig::parse(text));
  } catch (const ConfigError& e) {
    return e.what();
  }
  return "";
}

std::vector<char> bytes_of(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

void write_bytes(const fs::path& p, const std::vector<char>& b) {
  std::ofstream(p, std::ios::binary).write(b.data(), static_cast<std::streamsize>(b.size()));
}

}  // namespace

TEST_CASE("flat config grammar") {
  auto f = FlatConfig::parse(
      "# comment line\n"
      "  rfp.branches = 2   # trailing comment\n"
      "rfp.dilations=1,3\n"
      "\n"
      "train.lr = 0.005\n");
  CHECK(f.get_int("rfp.branches") == 2);
  CHECK(f.get_int_list("rfp.dilations") == std::vector<int>{1, 3});
  CHECK(f.get_double("train.lr") == 0.005);
  // untouched keys keep their defaults
  CHECK(f.raw("train.momentum") == default_config_values().at("train.momentum"));
  f.set("train.hflip", "false");
  CHECK_FALSE(f.get_bool("train.hflip"));

  CHECK_THROWS_AS(FlatConfig::parse("rfp.branch = 2\n"), ConfigError);
  CHECK_THROWS_AS(FlatConfig::parse("rfp.branches 2\n"), ConfigError);
  CHECK_THROWS_AS(FlatConfig::parse("rfp.branches = 2\nrfp.branches = 3\n"), ConfigError);
  CHECK_THROWS_AS(f.set("no.such", "1"), ConfigError);
  CHECK_THROWS_AS(FlatConfig::load("/nonexistent/x.cfg"), IoError);
}

TEST_CASE("config errors name the offending key") {
  CHECK(config_error("rfp.branches = 0\n").find("rfp.branches") != std::string::npos);
  CHECK(config_error("rfp.branches = two\n").find("rfp.branches") != std::string::npos);
  CHECK(config_error("rfp.fusion = max\n").find("rfp.fusion") != std::string::npos);
  CHECK(config_error("rfp.init_gain = 0\n").find("rfp.init_gain") != std::string::npos);
  CHECK(config_error("train.momentum = 1\n").find("train.momentum") != std::string::npos);
  CHECK(config_error("rfp.share_weights = maybe\n").find("rfp.share_weights") != std::string::npos);
  CHECK(config_error("rfp.inference = single:2\nrfp.fusion = add\n") != "");
  CHECK(config_error("rfp.branches = 2\nrfp.dilations = 1,3,5\n") != "");
  CHECK(config_error("") == "");
}

TEST_CASE("hashes separate architecture from everything else") {
  auto base = ExperimentConfig::from_flat(FlatConfig::parse(""));
  auto lr = ExperimentConfig::from_flat(FlatConfig::parse("train.lr = 0.001\ndata.seed = 9\n"));
  CHECK(lr.architecture_hash() == base.architecture_hash());
  CHECK(lr.config_hash() != base.config_hash());
  auto gain = ExperimentConfig::from_flat(FlatConfig::parse("rfp.init_gain = 0.5\n"));
  CHECK(gain.architecture_hash() == base.architecture_hash());
  for (const char* arch : {"rfp.branches = 2\nrfp.dilations = 1,3\n", "rfp.share_weights = false\n",
                           "rfp.fusion = add\n", "fpn.out_channels = 16\n", "rfp.enabled = false\n"}) {
    CAPTURE(arch);
    CHECK(ExperimentConfig::from_flat(FlatConfig::parse(arch)).architecture_hash() != base.architecture_hash());
  }
  // inference mode is not architecture: a folded model loads the same weights
  auto folded = ExperimentConfig::from_flat(FlatConfig::parse("rfp.inference = single:2\n"));
  CHECK(folded.architecture_hash() == base.architecture_hash());
  CHECK(format_hash(0xabc).size() == 16);
}

TEST_CASE("rfp keys round trip through store_rfp_config") {
  auto cfg = ExperimentConfig::from_flat(FlatConfig::parse(""));
  RfpConfig r = cfg.model.rfp;
  r.single_branch = 2;
  store_rfp_config(cfg.flat, r);
  auto back = ExperimentConfig::from_flat(cfg.flat);
  CHECK(back.model.rfp.single_branch == 2);
  CHECK(back.model.rfp.dilations == r.dilations);
  CHECK(FlatConfig::parse(cfg.flat.to_text()).to_text() == cfg.flat.to_text());
}

TEST_CASE("checkpoint byte layout and round trip") {
  TempDir t;
  Checkpoint c;
  c.arch_hash = 0x0102030405060708ULL;
  c.step = 42;
  c.config_text = "rfp.branches = 3\n";
  c.entries.push_back({"a/weight", {2, 3}, {1, -2, 3.5, 1e-300, -0.0, 7}});
  c.entries.push_back({"s", {}, {9}});
  write_checkpoint(t.path / "c.bin", c);
  auto b = bytes_of(t.path / "c.bin");
  REQUIRE(b.size() > 40);
  CHECK(std::memcmp(b.data(), "RFPCKPT\0", 8) == 0);
  CHECK(b[8] == 1);  // u32 version, little-endian
  CHECK(b[12] == 0x08);  // u64 arch hash, low byte first
  CHECK(b[19] == 0x01);
  CHECK(b[20] == 42);

  Checkpoint r = read_checkpoint(t.path / "c.bin");
  CHECK(r.arch_hash == c.arch_hash);
  CHECK(r.step == 42);
  CHECK(r.config_text == c.config_text);
  REQUIRE(r.entries.size() == 2);
  CHECK(r.entries[0].shape == c.entries[0].shape);
  CHECK(r.entries[0].values == c.entries[0].values);
  CHECK(std::signbit(r.entries[0].values[4]));
  CHECK(r.find("s")->values[0] == 9);
  CHECK(r.find("missing") == nullptr);

  write_bytes(t.path / "trunc.bin", std::vector<char>(b.begin(), b.end() - 5));
  CHECK_THROWS_AS(read_checkpoint(t.path / "trunc.bin"), IoError);
  auto bad = b;
  bad[0] = 'X';
  write_bytes(t.path / "magic.bin", bad);
  CHECK_THROWS_AS(read_checkpoint(t.path / "magic.bin"), IoError);
  auto extra = b;
  extra.push_back(0);
  write_bytes(t.path / "extra.bin", extra);
  CHECK_THROWS_AS(read_checkpoint(t.path / "extra.bin"), IoError);
  CHECK_THROWS_AS(read_checkpoint(t.path / "none.bin"), IoError);
}

TEST_CASE("snapshot and restore reproduce parameters and momentum") {
  TempDir t;
  DetectorConfig cfg;
  Detector a(cfg, 1), b(cfg, 2);
  auto& pa = a.params().all()[0];
  pa.velocity.assign(static_cast<size_t>(pa.tensor.numel()), 0.25);
  Checkpoint c;
  c.entries = snapshot(a.params());
  write_checkpoint(t.path / "m.bin", c);
  restore(b.params(), read_checkpoint(t.path / "m.bin"));
  for (size_t i = 0; i < a.params().size(); ++i) {
    CHECK(test::bit_equal(a.params().all()[i].tensor.values(), b.params().all()[i].tensor.values()));
    CHECK(a.params().all()[i].velocity == b.params().all()[i].velocity);
  }

  DetectorConfig other = cfg;
  other.fpn.out_channels = 16;
  other.rfp.channels = 16;
  Detector d(other, 1);
  CHECK_THROWS_AS(restore(d.params(), c), ConfigError);
  // momentum buffers are optional, parameters are not
  c.entries.erase(c.entries.begin());
  CHECK_THROWS_AS(restore(b.params(), c), ConfigError);
}

TEST_CASE("checkpoints refuse another architecture by hash") {
  auto cfg = ExperimentConfig::from_flat(FlatConfig::parse("train.steps = 0\n"));
  Detector det(cfg.model, cfg.train.seed);
  Checkpoint c = make_checkpoint(det, cfg, 0);
  CHECK(c.arch_hash == cfg.architecture_hash());
  CHECK_NOTHROW(check_architecture(c, cfg));
  auto back = config_from_checkpoint(c);
  CHECK(back.config_hash() == cfg.config_hash());
  auto other = ExperimentConfig::from_flat(FlatConfig::parse("rfp.fusion = add\n"));
  try {
    check_architecture(c, other);
    FAIL("expected ConfigError");
  } catch (const ConfigError& e) {
    CHECK(std::string(e.what()).find(format_hash(c.arch_hash)) != std::string::npos);
  }
  for (const auto& line : provenance_lines(cfg)) CHECK(line.find('\n') == std::string::npos);
}
