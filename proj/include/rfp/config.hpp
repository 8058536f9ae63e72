// SPDX-License-Identifier: Apache-2.0
//
// Experiment configuration: plain text, one `key = value` per line, `#`
// starts a comment, keys are flat dotted paths (see docs/config.md).
// Lists are comma separated. Unknown keys are rejected by name.
#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "rfp/data.hpp"
#include "rfp/detector.hpp"

namespace rfp {

class FlatConfig {
 public:
  static FlatConfig parse(const std::string& text, const std::string& origin = "<config>");
  static FlatConfig load(const std::filesystem::path& path);

  /// Applies a "key=value" override; the key must be known.
  void set(const std::string& key, const std::string& value);
  bool has(const std::string& key) const { return values_.count(key) != 0; }
  const std::string& raw(const std::string& key) const;

  std::string get_string(const std::string& key) const;
  int get_int(const std::string& key) const;
  uint64_t get_u64(const std::string& key) const;
  double get_double(const std::string& key) const;
  bool get_bool(const std::string& key) const;
  std::vector<int> get_int_list(const std::string& key) const;

  /// Canonical text: every known key with its resolved value, sorted.
  std::string to_text() const;
  const std::map<std::string, std::string>& values() const { return values_; }

 private:
  std::map<std::string, std::string> values_;
};

/// Defaults for every known key (desk-scale preset).
const std::map<std::string, std::string>& default_config_values();

struct TrainConfig {
  double lr = 0.02;
  double momentum = 0.9;
  double weight_decay = 1e-4;
  int steps = 1000;
  int batch = 8;
  uint64_t seed = 1;
  bool hflip = true;
  bool random_crop = false;
  double lr_drop_at = 0.8;  // fraction of steps after which lr is divided by 10
  int warmup_steps = 50;
  double clip_grad_norm = 0;  // global L2 clip, 0 = off
  int log_every = 25;
};

struct ExperimentConfig {
  DetectorConfig model;
  TrainConfig train;
  SceneSpec data;
  int train_images = 500;
  int test_images = 200;
  std::string data_dir;  // external dataset directory; empty = synthetic
  std::string report_dir = "runs/default";
  FlatConfig flat;       // resolved source of everything above

  static ExperimentConfig from_flat(const FlatConfig& flat);
  static ExperimentConfig load(const std::filesystem::path& path,
                               const std::vector<std::string>& overrides = {});

  /// FNV-1a over the keys that determine parameter shapes and semantics.
  uint64_t architecture_hash() const;
  uint64_t config_hash() const;
};

/// Applies an RfpConfig back onto the flat keys (used after folding).
void store_rfp_config(FlatConfig& flat, const RfpConfig& rfp);

std::string format_hash(uint64_t h);
/// "rfp-artifact <version>"
std::string code_version();

}  // namespace rfp
