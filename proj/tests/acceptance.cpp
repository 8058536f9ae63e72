// SPDX-License-Identifier: Apache-2.0
//
// Acceptance runner: one PASS/FAIL line per criterion, nonzero exit if any
// selected criterion fails. `--only 6` runs the toy training study alone.
#include <sys/wait.h>

#include <CLI11.hpp>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <random>
#include <set>
#include <sstream>

#include "detection_oracles.hpp"
#include "rfp/config.hpp"
#include "rfp/cost_model.hpp"
#include "rfp/errors.hpp"
#include "rfp/gradcheck.hpp"
#include "rfp/rfp_block.hpp"
#include "rfp/trainer.hpp"
#include "test_util.hpp"

using namespace rfp;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = false;
  std::string detail;
};

constexpr int64_t kConv256 = 256LL * 256 * 9;

DetectorConfig published(int branches, bool shared) {
  auto flat = FlatConfig::load(RFP_SOURCE_DIR "/configs/resnet50_fpn.cfg");
  flat.set("rfp.branches", std::to_string(branches));
  flat.set("rfp.share_weights", shared ? "true" : "false");
  return ExperimentConfig::from_flat(flat).model;
}

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof buf, f, args...);
  return buf;
}

Verdict params_constant() {
  std::vector<int64_t> p;
  for (int b = 1; b <= 4; ++b) p.push_back(detector_cost(published(b, true), 960, 1024).params);
  const bool same = std::all_of(p.begin(), p.end(), [&](int64_t v) { return v == p[0]; });
  return {same, fmt("params for B=1..4: %lld %lld %lld %lld", (long long)p[0], (long long)p[1],
                    (long long)p[2], (long long)p[3])};
}

Verdict mac_step() {
  std::vector<int64_t> m;
  for (int b = 1; b <= 4; ++b) m.push_back(detector_cost(published(b, true), 960, 1024).macs);
  const int64_t d2 = m[1] - m[0], d3 = m[2] - m[1], d4 = m[3] - m[2];
  const double step = static_cast<double>(d2) / 1e9;
  const double rel = step / 45.09 - 1.0;
  const bool pass = d2 == d3 && d3 == d4 && std::abs(rel) <= 0.10;
  return {pass, fmt("step %.3f GMAC at B=2,3,4 (%s); vs published 45.09: %+.1f%% (residual gap %.2f G)", step,
                    d2 == d3 && d3 == d4 ? "constant" : "NOT constant", 100 * rel, step - 45.09)};
}

Verdict sharing_delta() {
  const int64_t shared = detector_cost(published(3, true), 960, 1024).params;
  const int64_t unshared = detector_cost(published(3, false), 960, 1024).params;
  const double delta = static_cast<double>(unshared - shared) / 1e6;
  const double rel = delta / (36.33 - 29.56) - 1.0;
  const bool pass = unshared - shared == 2 * 6 * kConv256 && std::abs(rel) <= 0.06;
  return {pass, fmt("unshared - shared = %.3fM (2 x 6 x 589,824); vs published 6.77M: %+.1f%%", delta, 100 * rel)};
}

Verdict gradients() {
  GradcheckOptions opts;
  opts.tolerance = 1e-5;
  double worst = 0;
  std::string worst_family;
  int families = 0;
  bool pass = true;
  for (const auto& f : gradcheck_families()) {
    auto st = run_gradcheck_family(f, 100, 1, opts);
    pass &= st.passed();
    ++families;
    if (st.max_rel_error >= worst) {
      worst = st.max_rel_error;
      worst_family = f;
    }
  }
  auto model = run_model_gradcheck(tiny_gradcheck_config(), 16, 100, 1, opts);
  pass &= model.passed();
  return {pass, fmt("%d op families x 100 seeds, worst %.2e (%s); 4-channel 16x16 model x 100 seeds %.2e, %lld/%lld skipped",
                    families, worst, worst_family.c_str(), model.max_rel_error, (long long)model.skipped,
                    (long long)model.coords)};
}

Verdict fold_identity() {
  std::mt19937_64 rng(17);
  double worst = 0;
  for (int trial = 0; trial < 20; ++trial) {
    const int b = 2 + trial % 3, c = 3 + trial % 4, d = 1 + trial % 5;
    RfpConfig cfg = RfpConfig::with_branches(b, c);
    cfg.dilations.assign(static_cast<size_t>(b), d);
    ParameterStore store;
    auto params = RfpParams::create(cfg, store, "rfp", rng);
    Tensor x = test::random_tensor(Shape{2, c, 9 + trial, 13}, rng);
    Tensor pooled = rfp_forward(x, cfg, params);
    for (int i = 1; i <= b; ++i) {
      Tensor one = rfp_forward(x, fold_for_inference(cfg, i), params);
      worst = std::max(worst, test::max_abs_diff(pooled.values(), one.values()));
    }
  }
  int refused = 0;
  for (Fusion f : {Fusion::add, Fusion::concat}) {
    RfpConfig cfg;
    cfg.fusion = f;
    try {
      fold_for_inference(cfg, 2);
    } catch (const ConfigError&) {
      ++refused;
    }
    cfg.single_branch = 2;
    try {
      cfg.validate();
    } catch (const ConfigError&) {
      ++refused;
    }
  }
  return {worst <= 1e-12 && refused == 4,
          fmt("equal dilations, shared: max |pool - single| = %.1e over 20 blocks; add/concat fold refusals %d/4", worst,
              refused)};
}

Verdict oracles() {
  std::mt19937_64 rng(2024);
  int match_bad = 0, nms_bad = 0, ap_bad = 0;
  double ap_worst = 0;
  std::uniform_int_distribution<int> count(0, 20);
  for (int t = 0; t < 1000; ++t) {
    std::vector<Anchor> anchors;
    std::vector<Box> gts;
    const int na = 1 + count(rng), ng = count(rng);
    for (int i = 0; i < na; ++i) anchors.push_back(oracle::random_anchor(rng));
    for (int i = 0; i < ng; ++i) gts.push_back(oracle::random_box(rng));
    match_bad += match_anchors(anchors, gts).label != oracle::oracle_match(anchors, gts, 0.35, 0.3);
  }
  for (int t = 0; t < 1000; ++t) {
    auto in = oracle::random_ap_instance(rng);
    nms_bad += !oracle::same_detections(nms(in.dets, 0.4), oracle::oracle_nms(in.dets, 0.4));
    const double err = std::abs(evaluate_ap(in.dets, in.gts).ap - oracle::oracle_ap(in.dets, in.gts, 0.5));
    ap_worst = std::max(ap_worst, err);
    ap_bad += err > 1e-9;
  }
  return {match_bad + nms_bad + ap_bad == 0,
          fmt("1000 instances each: matching %d mismatches, NMS %d, AP %d (max |diff| %.1e)", match_bad, nms_bad,
              ap_bad, ap_worst)};
}

int run_cli(const std::string& args, const fs::path& log) {
  const std::string cmd = std::string(RFP_CLI_PATH) + " " + args + " > " + log.string() + " 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

Verdict determinism() {
  // Same output directory both times, so embedded paths match too.
  const fs::path root = fs::temp_directory_path() / ("rfp_accept_" + std::to_string(std::random_device{}()));
  const fs::path dir = root / "run";
  fs::create_directories(root);
  const std::string flags = "-s train.steps=8 -s data.train_images=64 -s data.test_images=32 -o " + dir.string();
  const std::vector<std::string> files = {"checkpoint.bin", "train_log.txt", "eval/metrics.json",
                                          "eval/pr_curve.csv", "eval/detections.txt"};
  std::vector<std::vector<std::string>> runs;
  for (int r = 0; r < 2; ++r) {
    fs::remove_all(dir);
    if (run_cli("train " + flags, root / "train.log") != 0 ||
        run_cli("eval --checkpoint " + (dir / "checkpoint.bin").string() + " -o " + (dir / "eval").string(),
                root / "eval.log") != 0) {
      fs::remove_all(root);
      return {false, "train/eval run failed"};
    }
    std::vector<std::string> contents;
    for (const auto& f : files) contents.push_back(slurp(dir / f));
    runs.push_back(contents);
  }
  fs::remove_all(root);
  int same = 0;
  size_t bytes = 0;
  for (size_t i = 0; i < files.size(); ++i) {
    same += runs[0][i] == runs[1][i] && !runs[0][i].empty();
    bytes += runs[0][i].size();
  }
  return {same == static_cast<int>(files.size()),
          fmt("%d/%zu files bitwise identical across two 8-step runs (%zu bytes)", same, files.size(), bytes)};
}

Verdict training_study(const std::string& config_path) {
  auto cfg = ExperimentConfig::load(config_path);
  if (cfg.train_images < 500 || cfg.test_images < 200 || cfg.data.image_size != 128) {
    return {false, "study config must use >= 500 train / 200 test images at 128x128"};
  }
  const std::vector<uint64_t> seeds{1, 2, 3};
  auto rows = run_fusion_study(cfg, seeds, [](const std::string& s) { std::printf("  %s\n", s.c_str()); std::fflush(stdout); });
  bool a = true, fold_ok = true;
  int add_degrades = 0;
  std::string per_seed;
  for (const auto& r : rows) {
    a &= r.ap_b3 >= r.ap_b1;
    fold_ok &= std::abs(r.ap_b3_fold2 - r.ap_b3) * 100 <= 2.0;
    add_degrades += (r.ap_add - r.ap_add_single2) * 100 > 2.0;
    per_seed += fmt("\n  seed %llu: B1 %.1f | B3 %.1f fold2 %.1f (%+.1f) | add %.1f single2 %.1f (%+.1f) | MACs fold/full %.3f",
                    (unsigned long long)r.seed, 100 * r.ap_b1, 100 * r.ap_b3, 100 * r.ap_b3_fold2,
                    100 * (r.ap_b3_fold2 - r.ap_b3), 100 * r.ap_add, 100 * r.ap_add_single2,
                    100 * (r.ap_add_single2 - r.ap_add), r.macs_fold2 / r.macs_b3);
  }
  const bool pass = a && fold_ok && add_degrades >= 2;
  return {pass, fmt("(a) B3 >= B1 on all seeds: %s; (b) fold2 within 2.0 on all seeds: %s; add single-branch drop > 2.0 on %d/3",
                    a ? "yes" : "no", fold_ok ? "yes" : "no", add_degrades) +
                    per_seed};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::vector<int> only;
  std::string study = RFP_SOURCE_DIR "/configs/fusion_study.cfg";
  app.add_option("--only", only, "criteria to run (default all)")->delimiter(',');
  app.add_option("--study-config", study, "config for the toy training study");
  CLI11_PARSE(app, argc, argv);
  std::set<int> selected(only.begin(), only.end());
  if (selected.empty()) selected = {1, 2, 3, 4, 5, 6, 7, 8};

  struct Criterion {
    std::string name;
    std::function<Verdict()> run;
    double budget_secs;  // 0: unbounded
  };
  const std::vector<Criterion> criteria = {
      {"parameter count constant under sharing", params_constant, 0},
      {"constant per-branch MAC step", mac_step, 0},
      {"sharing parameter delta", sharing_delta, 0},
      {"finite-difference gradients", gradients, 120},
      {"fold identity and refusal", fold_identity, 10},
      {"toy training: pooling, folding, add fusion", [&] { return training_study(study); }, 3600},
      {"matching / NMS / AP oracles", oracles, 0},
      {"bitwise determinism of reruns", determinism, 0},
  };
  int failed = 0;
  for (size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!selected.count(id)) continue;
    const auto t0 = std::chrono::steady_clock::now();
    Verdict v;
    try {
      v = criteria[i].run();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    const double budget = criteria[i].budget_secs;
    if (budget > 0 && secs > budget) {
      v.pass = false;
      v.detail += fmt(" (over the %.0f s budget)", budget);
    }
    failed += !v.pass;
    std::printf("criterion %d %s  %s: %s  [%.1f s]\n", id, v.pass ? "PASS" : "FAIL", criteria[i].name.c_str(),
                v.detail.c_str(), secs);
    std::fflush(stdout);
  }
  return failed == 0 ? 0 : 1;
}
