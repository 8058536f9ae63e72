// SPDX-License-Identifier: Apache-2.0
//
// Toy training and evaluation on synthetic (or on-disk) datasets. Every random
// choice during training is a pure function of (train.seed, step), so a run
// resumed from a checkpoint continues exactly as an uninterrupted one.
#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "rfp/checkpoint.hpp"
#include "rfp/config.hpp"
#include "rfp/data.hpp"
#include "rfp/detector.hpp"

namespace rfp {

struct Splits {
  Dataset train;
  Dataset test;
};

/// Synthetic: train images 0..n-1 and test images n..n+m-1 of one scene stream.
/// With data.dir set: <dir>/train and <dir>/test dataset directories.
Splits load_splits(const ExperimentConfig& cfg);

/// Linear warmup to train.lr, then a 10x drop after lr_drop_at * steps.
double learning_rate(const TrainConfig& t, int step);

/// Images used at `step`: consecutive slices of per-epoch permutations.
std::vector<int> batch_indices(const TrainConfig& t, int n_images, int step);

struct StepLog {
  int step = 0;
  double lr = 0;
  double loss = 0;
  double classification = 0;
  double regression = 0;
  int positives = 0;
  int negatives = 0;
};

/// Runs steps [from, to). `on_step` sees every step.
void train_steps(Detector& det, const ExperimentConfig& cfg, const Dataset& data, int from, int to,
                 const std::function<void(const StepLog&)>& on_step = {});

struct EvalResult {
  ApResult ap;
  std::vector<std::vector<Detection>> detections;  // per image
  double macs_per_image = 0;  // measured by the conv op counter
};

EvalResult evaluate(const Detector& det, const Dataset& data,
                    std::optional<int> probe_branch = std::nullopt, int batch = 16);

/// Config text stored in checkpoints: resolved keys plus "#" provenance lines.
std::string checkpoint_config_text(const ExperimentConfig& cfg);
Checkpoint make_checkpoint(const Detector& det, const ExperimentConfig& cfg, uint64_t step);
ExperimentConfig config_from_checkpoint(const Checkpoint& ckpt);

/// ConfigError naming both hashes when the checkpoint was built for another architecture.
void check_architecture(const Checkpoint& ckpt, const ExperimentConfig& cfg);

/// Header lines ("config_hash ...", "code_version ...") embedded in every artifact.
std::vector<std::string> provenance_lines(const ExperimentConfig& cfg);

// Branch/fusion training study: per seed, B=1 pool, B=3 pool and B=3 add
// models trained on identical data, evaluated on the test split.
struct FusionStudyRow {
  uint64_t seed = 0;
  double ap_b1 = 0;
  double ap_b3 = 0;
  double ap_b3_fold2 = 0;    // B=3 pool, branch 2 only
  double ap_add = 0;         // B=3 add, all branches
  double ap_add_single2 = 0; // B=3 add, branch 2 only
  double macs_b3 = 0;
  double macs_fold2 = 0;
};

std::vector<FusionStudyRow> run_fusion_study(const ExperimentConfig& base,
                                             std::span<const uint64_t> seeds,
                                             const std::function<void(const std::string&)>& progress = {});

}  // namespace rfp
