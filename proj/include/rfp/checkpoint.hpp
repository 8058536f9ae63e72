// SPDX-License-Identifier: Apache-2.0
//
// Flat parameter checkpoint container. All integers little-endian:
//
//   magic        8 bytes  "RFPCKPT\0"
//   version      u32      kCheckpointVersion
//   arch_hash    u64      architecture hash of the embedded config
//   step         u64      optimizer steps taken
//   config_len   u32, then config_len bytes of resolved config text
//   entry_count  u32
//   entry_count times:
//     name_len u32, name bytes
//     rank     u32, then rank x u64 extents
//     numel x f64 values (IEEE-754 binary64, little-endian)
//
// Optimizer momentum buffers are stored as ordinary entries under "opt/velocity/<name>".
#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "rfp/parameter.hpp"

namespace rfp {

inline constexpr uint32_t kCheckpointVersion = 1;

struct CheckpointEntry {
  std::string name;
  std::vector<int64_t> shape;
  std::vector<double> values;
};

struct Checkpoint {
  uint64_t arch_hash = 0;
  uint64_t step = 0;
  std::string config_text;
  std::vector<CheckpointEntry> entries;

  const CheckpointEntry* find(const std::string& name) const;
};

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

/// Snapshot of every parameter (and momentum buffer when present).
std::vector<CheckpointEntry> snapshot(const ParameterStore& store);

/// Copies entries back into a store built from the same architecture.
/// Missing or mis-shaped entries are a ConfigError.
void restore(ParameterStore& store, const Checkpoint& ckpt);

}  // namespace rfp
