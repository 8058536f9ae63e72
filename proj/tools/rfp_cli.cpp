// SPDX-License-Identifier: Apache-2.0
//
// rfp: cost tables, gradient checks, training, evaluation, folding, dataset
// generation and ablation sweeps. Run `rfp <verb> --help` for flags.
#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>
#include <sstream>

#include "rfp/checkpoint.hpp"
#include "rfp/config.hpp"
#include "rfp/cost_model.hpp"
#include "rfp/gradcheck.hpp"
#include "rfp/kernels.hpp"
#include "rfp/trainer.hpp"

namespace fs = std::filesystem;
using json = nlohmann::ordered_json;
using namespace rfp;

namespace {

struct Common {
  std::string config;
  std::vector<std::string> overrides;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config, "config file (key = value lines)");
  cmd->add_option("-s,--set", c.overrides, "override a config key, key=value (repeatable)");
}

ExperimentConfig load_config(const Common& c) { return ExperimentConfig::load(c.config, c.overrides); }

std::pair<int64_t, int64_t> parse_hw(const std::string& s) {
  const auto x = s.find_first_of("xX");
  try {
    if (x == std::string::npos) {
      const int64_t n = std::stoll(s);
      return {n, n};
    }
    return {std::stoll(s.substr(0, x)), std::stoll(s.substr(x + 1))};
  } catch (const std::exception&) {
    throw ConfigError("--input expects HxW, got '" + s + "'");
  }
}

std::ofstream open_out(const fs::path& p) {
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream out(p, std::ios::trunc);
  if (!out) throw IoError("cannot open " + p.string() + " for writing");
  return out;
}

void write_header(std::ostream& out, const ExperimentConfig& cfg) {
  for (const auto& l : provenance_lines(cfg)) out << "# " << l << "\n";
}

json provenance_json(const ExperimentConfig& cfg) {
  return {{"config_hash", format_hash(cfg.config_hash())},
          {"architecture_hash", format_hash(cfg.architecture_hash())},
          {"code_version", code_version()},
          {"config", cfg.flat.to_text()}};
}

// ---- cost -----------------------------------------------------------------

int cmd_cost(const Common& common, const std::string& input, const std::string& axis,
             const std::string& csv, const std::string& graph_out) {
  ExperimentConfig cfg = load_config(common);
  auto [h, w] = input.empty() ? std::pair<int64_t, int64_t>{cfg.data.image_size, cfg.data.image_size}
                              : parse_hw(input);
  if (h % 128 != 0 || w % 128 != 0) {
    std::cerr << "warning: input " << h << "x" << w
              << " is not a multiple of 128; spatial sizes follow conv arithmetic (floor semantics)";
    if (cfg.model.backbone_kind == BackboneKind::stub && cfg.model.backbone.input_policy == InputPolicy::pad) {
      auto [eh, ew] = cost_input_size(cfg.model, h, w);
      std::cerr << " after padding to " << eh << "x" << ew;
    }
    std::cerr << "\n";
  }
  write_header(std::cout, cfg);
  const Graph g = describe_detector(cfg.model);
  if (!graph_out.empty()) open_out(graph_out) << graph_to_text(g);
  std::cout << "model\n" << format_report_text(detector_cost(cfg.model, h, w));

  std::vector<AblationAxis> axes;
  if (axis == "all") {
    axes = {AblationAxis::branches, AblationAxis::sharing, AblationAxis::fusion};
  } else if (axis != "none") {
    axes = {parse_ablation_axis(axis)};
  }
  std::ofstream csv_out;
  if (!csv.empty()) {
    csv_out = open_out(csv);
    write_header(csv_out, cfg);
  }
  for (AblationAxis a : axes) {
    const auto rows = ablation_table(cfg.model, a, h, w);
    const char* name = a == AblationAxis::branches ? "branches" : a == AblationAxis::sharing ? "sharing" : "fusion";
    std::cout << "\nablation: " << name << "\n" << format_table_text(rows);
    if (csv_out) csv_out << "# axis " << name << "\n" << format_table_csv(rows);
  }
  return kExitOk;
}

// ---- train ----------------------------------------------------------------

int cmd_train(const Common& common, std::string out_dir, const std::string& resume) {
  ExperimentConfig cfg = load_config(common);
  if (out_dir.empty()) out_dir = cfg.report_dir;
  const fs::path dir(out_dir);
  fs::create_directories(dir);

  Detector det(cfg.model, cfg.train.seed);
  int start = 0;
  if (!resume.empty()) {
    Checkpoint ck = read_checkpoint(resume);
    check_architecture(ck, cfg);
    restore(det.params(), ck);
    start = static_cast<int>(ck.step);
    if (start > cfg.train.steps) {
      throw ConfigError("checkpoint is at step " + std::to_string(start) + ", beyond train.steps " +
                        std::to_string(cfg.train.steps));
    }
  }
  const Splits data = load_splits(cfg);
  std::cout << "training " << data.train.size() << " images, steps " << start << ".." << cfg.train.steps
            << ", " << det.params().total_elements() << " parameters, config " << format_hash(cfg.config_hash())
            << "\n";

  const fs::path log_path = dir / "train_log.txt";
  std::ofstream log;
  if (start == 0) {
    log = open_out(log_path);
    write_header(log, cfg);
    log << "step lr loss classification regression positives negatives\n";
  } else {
    log.open(log_path, std::ios::app);
    if (!log) throw IoError("cannot append to " + log_path.string());
  }
  train_steps(det, cfg, data.train, start, cfg.train.steps, [&](const StepLog& s) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%d %.17g %.17g %.17g %.17g %d %d\n", s.step, s.lr, s.loss, s.classification,
                  s.regression, s.positives, s.negatives);
    log << buf;
    if (s.step % cfg.train.log_every == 0 || s.step + 1 == cfg.train.steps) {
      std::printf("step %5d  lr %.4g  loss %.5f  (cls %.5f, reg %.5f, pos %d)\n", s.step, s.lr, s.loss,
                  s.classification, s.regression, s.positives);
      std::fflush(stdout);
    }
  });
  write_checkpoint(dir / "checkpoint.bin", make_checkpoint(det, cfg, static_cast<uint64_t>(cfg.train.steps)));
  std::cout << "wrote " << (dir / "checkpoint.bin").string() << "\n";
  return kExitOk;
}

// ---- eval -----------------------------------------------------------------

int cmd_eval(const Common& common, const std::string& ckpt_path, std::string out_dir, int probe) {
  Checkpoint ck = read_checkpoint(ckpt_path);
  ExperimentConfig cfg = config_from_checkpoint(ck);
  if (!common.config.empty() || !common.overrides.empty()) {
    // Data and head settings may differ from training; the architecture may not.
    FlatConfig flat = common.config.empty() ? cfg.flat : FlatConfig::load(common.config);
    for (const auto& o : common.overrides) {
      const auto eq = o.find('=');
      if (eq == std::string::npos) throw ConfigError("override '" + o + "' is not key=value");
      flat.set(o.substr(0, eq), o.substr(eq + 1));
    }
    ExperimentConfig requested = ExperimentConfig::from_flat(flat);
    check_architecture(ck, requested);
    cfg = requested;
  }
  if (out_dir.empty()) out_dir = cfg.report_dir;
  const fs::path dir(out_dir);
  fs::create_directories(dir);

  Detector det(cfg.model, cfg.train.seed);
  restore(det.params(), ck);
  const Splits data = load_splits(cfg);
  std::optional<int> probe_branch;
  if (probe > 0) probe_branch = probe;
  EvalResult r = evaluate(det, data.test, probe_branch);

  // MAC ratio against the same model with all branches evaluated.
  DetectorConfig full = cfg.model;
  full.rfp.single_branch.reset();
  const double unfolded = static_cast<double>(detector_cost(full, cfg.model.image_h, cfg.model.image_w).macs);
  const double ratio = r.macs_per_image / unfolded;

  std::ofstream pr = open_out(dir / "pr_curve.csv");
  write_header(pr, cfg);
  pr << "recall,precision,score\n";
  for (const auto& p : r.ap.curve) {
    char buf[128];
    std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g\n", p.recall, p.precision, p.score);
    pr << buf;
  }
  write_detections(dir / "detections.txt", data.test.names, r.detections, provenance_lines(cfg));

  json m = provenance_json(cfg);
  m["checkpoint"] = ckpt_path;
  m["checkpoint_step"] = ck.step;
  m["inference"] = cfg.flat.get_string("rfp.inference");
  m["probe_branch"] = probe > 0 ? json(probe) : json(nullptr);
  m["test_images"] = data.test.size();
  m["ap50"] = r.ap.ap;
  m["true_positives"] = r.ap.true_positives;
  m["ground_truths"] = r.ap.ground_truths;
  m["macs_per_image"] = r.macs_per_image;
  m["unfolded_macs_per_image"] = unfolded;
  m["mac_ratio_vs_unfolded"] = ratio;
  open_out(dir / "metrics.json") << m.dump(2) << "\n";

  std::printf("AP@0.5 %.4f  (%d/%d ground truths found)\n", r.ap.ap, r.ap.true_positives, r.ap.ground_truths);
  std::printf("MACs per image %.0f; all-branch model %.0f; ratio %.4f\n", r.macs_per_image, unfolded, ratio);
  std::printf("wrote %s, %s, %s\n", (dir / "metrics.json").c_str(), (dir / "pr_curve.csv").c_str(),
              (dir / "detections.txt").c_str());
  return kExitOk;
}

// ---- fold -----------------------------------------------------------------

int cmd_fold(const std::string& ckpt_path, int branch, const std::string& out) {
  Checkpoint ck = read_checkpoint(ckpt_path);
  ExperimentConfig cfg = config_from_checkpoint(ck);
  if (!cfg.model.rfp_enabled) throw ConfigError("checkpoint has no RFP blocks to fold");
  RfpConfig folded = fold_for_inference(cfg.model.rfp, branch);
  FlatConfig flat = cfg.flat;
  store_rfp_config(flat, folded);
  ExperimentConfig next = ExperimentConfig::from_flat(flat);
  if (next.architecture_hash() != ck.arch_hash) throw ContractError("folding changed the architecture hash");
  ck.config_text = checkpoint_config_text(next);
  write_checkpoint(out, ck);
  const double before = static_cast<double>(detector_cost(cfg.model, cfg.model.image_h, cfg.model.image_w).macs);
  const double after = static_cast<double>(detector_cost(next.model, next.model.image_h, next.model.image_w).macs);
  std::printf("folded to branch %d (dilation %d); MACs per image %.0f -> %.0f (ratio %.4f)\nwrote %s\n", branch,
              folded.dilations[static_cast<size_t>(branch - 1)], before, after, after / before, out.c_str());
  return kExitOk;
}

// ---- gradcheck --------------------------------------------------------------

int cmd_gradcheck(const Common& common, int seeds, int model_seeds, const std::string& families) {
  ExperimentConfig cfg = load_config(common);
  std::vector<std::string> fams;
  if (families.empty() || families == "all") {
    fams = gradcheck_families();
  } else {
    std::stringstream ss(families);
    std::string f;
    while (std::getline(ss, f, ',')) fams.push_back(f);
  }
  write_header(std::cout, cfg);
  std::printf("%-22s %6s %8s %8s %12s %10s  %s\n", "family", "seeds", "coords", "skipped", "max_rel_err", "tolerance",
              "result");
  bool ok = true;
  auto row = [&](const GradcheckStats& s) {
    ok = ok && s.passed();
    std::printf("%-22s %6d %8lld %8lld %12.3e %10.1e  %s\n", s.family.c_str(), s.seeds,
                static_cast<long long>(s.coords), static_cast<long long>(s.skipped), s.max_rel_error, s.tolerance,
                s.passed() ? "pass" : "FAIL");
    if (!s.passed()) std::printf("    worst: %s\n", s.worst.c_str());
    std::fflush(stdout);
  };
  GradcheckOptions op;
  for (const auto& f : fams) {
    if (f == "detector") continue;
    row(run_gradcheck_family(f, seeds, 1, op));
  }
  if (model_seeds > 0 && (families.empty() || families == "all" || families.find("detector") != std::string::npos)) {
    GradcheckOptions mo;
    mo.tolerance = 1e-5;
    DetectorConfig m = tiny_gradcheck_config();
    row(run_model_gradcheck(m, 16, model_seeds, 1, mo));
    // The configured model at its own width, on a 16x16 input.
    DetectorConfig desk = cfg.model;
    desk.backbone.input_policy = InputPolicy::floor;
    GradcheckStats d = run_model_gradcheck(desk, 16, std::max(1, model_seeds / 10), 1, mo);
    d.family = "detector(config)";
    row(d);
  }
  std::printf("%s\n", ok ? "gradcheck passed" : "gradcheck FAILED");
  return ok ? kExitOk : kExitContract;
}

// ---- datagen --------------------------------------------------------------

int cmd_datagen(const Common& common, std::string out_dir) {
  ExperimentConfig cfg = load_config(common);
  if (out_dir.empty()) out_dir = cfg.report_dir + "/data";
  const fs::path dir(out_dir);
  const auto header = provenance_lines(cfg);
  Dataset train = generate_dataset(cfg.data, cfg.train_images, 0);
  Dataset test = generate_dataset(cfg.data, cfg.test_images, cfg.train_images);
  write_dataset(dir / "train", train, header);
  write_dataset(dir / "test", test, header);
  size_t boxes = 0;
  for (const auto& b : train.boxes) boxes += b.size();
  for (const auto& b : test.boxes) boxes += b.size();
  std::printf("wrote %zu train and %zu test images (%zu boxes) to %s\n", train.size(), test.size(), boxes,
              dir.c_str());
  return kExitOk;
}

// ---- ablate ---------------------------------------------------------------

int cmd_ablate(const Common& common, const std::string& axis, const std::string& input, bool train,
               const std::vector<uint64_t>& seeds, std::string out_dir) {
  if (!train) return cmd_cost(common, input, axis, "", "");
  ExperimentConfig cfg = load_config(common);
  if (out_dir.empty()) out_dir = cfg.report_dir;
  fs::create_directories(out_dir);
  write_header(std::cout, cfg);
  auto rows = run_fusion_study(cfg, seeds, [](const std::string& s) {
    std::cout << s << std::endl;
  });
  std::ofstream csv = open_out(fs::path(out_dir) / "fusion_study.csv");
  write_header(csv, cfg);
  csv << "seed,ap_b1,ap_b3,ap_b3_fold2,ap_add,ap_add_single2,macs_b3,macs_fold2\n";
  std::printf("\n%6s %8s %8s %10s %8s %12s\n", "seed", "B=1", "B=3", "B=3 fold2", "add", "add branch2");
  for (const auto& r : rows) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%llu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n",
                  static_cast<unsigned long long>(r.seed), r.ap_b1, r.ap_b3, r.ap_b3_fold2, r.ap_add,
                  r.ap_add_single2, r.macs_b3, r.macs_fold2);
    csv << buf;
    std::printf("%6llu %8.4f %8.4f %10.4f %8.4f %12.4f\n", static_cast<unsigned long long>(r.seed), r.ap_b1,
                r.ap_b3, r.ap_b3_fold2, r.ap_add, r.ap_add_single2);
  }
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Receptive field pyramid detector toolkit"};
  app.require_subcommand(1);
  app.set_version_flag("--version", code_version());

  Common common;
  std::string input, axis = "all", csv, graph_out, out, resume, ckpt, families;
  int probe = 0, branch = 2, seeds = 100, model_seeds = 100;
  bool train = false;
  std::vector<uint64_t> study_seeds{1, 2, 3};

  auto* cost = app.add_subcommand("cost", "parameter and MAC tables, with ablation sweeps");
  add_common(cost, common);
  cost->add_option("--input", input, "input size HxW (default: data.image_size)");
  cost->add_option("--axis", axis, "branches, sharing, fusion, all or none")->capture_default_str();
  cost->add_option("--csv", csv, "also write the ablation tables as CSV");
  cost->add_option("--graph", graph_out, "write the layer graph in text form");

  auto* trn = app.add_subcommand("train", "train a detector and write a checkpoint");
  add_common(trn, common);
  trn->add_option("-o,--out", out, "output directory (default: report.dir)");
  trn->add_option("--resume", resume, "continue from this checkpoint");

  auto* ev = app.add_subcommand("eval", "AP@0.5, PR curve and detections on the test split");
  add_common(ev, common);
  ev->add_option("--checkpoint", ckpt, "checkpoint file")->required();
  ev->add_option("-o,--out", out, "output directory (default: report.dir)");
  ev->add_option("--probe-branch", probe, "evaluate only this RFP branch, whatever the fusion mode");

  auto* fold = app.add_subcommand("fold", "switch a branch-pool checkpoint to single-branch inference");
  fold->add_option("--checkpoint", ckpt, "checkpoint file")->required();
  fold->add_option("--branch", branch, "1-based branch to keep")->capture_default_str();
  fold->add_option("-o,--out", out, "folded checkpoint path")->required();

  auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient checks per op family");
  add_common(gc, common);
  gc->add_option("--seeds", seeds, "random cases per op family")->capture_default_str();
  gc->add_option("--model-seeds", model_seeds, "random cases for the full detector")->capture_default_str();
  gc->add_option("--families", families, "comma-separated subset (default all)");

  auto* dg = app.add_subcommand("datagen", "write the synthetic train/test datasets to disk");
  add_common(dg, common);
  dg->add_option("-o,--out", out, "output directory (default: <report.dir>/data)");

  auto* ab = app.add_subcommand("ablate", "cost ablation tables, or with --train the fusion study");
  add_common(ab, common);
  ab->add_option("--axis", axis, "branches, sharing, fusion or all")->capture_default_str();
  ab->add_option("--input", input, "input size HxW for cost tables");
  ab->add_flag("--train", train, "train B=1 pool, B=3 pool and B=3 add models per seed");
  ab->add_option("--seeds", study_seeds, "seeds for --train")->delimiter(',')->capture_default_str();
  ab->add_option("-o,--out", out, "output directory for --train (default: report.dir)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    kernels::configure_threads_from_env();
    if (*cost) return cmd_cost(common, input, axis, csv, graph_out);
    if (*trn) return cmd_train(common, out, resume);
    if (*ev) return cmd_eval(common, ckpt, out, probe);
    if (*fold) return cmd_fold(ckpt, branch, out);
    if (*gc) return cmd_gradcheck(common, seeds, model_seeds, families);
    if (*dg) return cmd_datagen(common, out);
    if (*ab) return cmd_ablate(common, axis, input, train, study_seeds, out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const ContractError& e) {
    std::cerr << "contract violation: " << e.what() << "\n";
    return kExitContract;
  } catch (const IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitContract;
  }
  return kExitOk;
}
