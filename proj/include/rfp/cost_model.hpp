// SPDX-License-Identifier: Apache-2.0
//
// Parameter and multiply-accumulate accounting over a declarative layer graph.
// Spatial sizes follow conv arithmetic (floor semantics), so inputs that are
// not multiples of the deepest stride are still well defined.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "rfp/detector.hpp"

namespace rfp {

enum class LayerKind {
  conv,      // weights Cout x Cin x k x k, optional bias
  add,       // elementwise sum; later inputs are cropped top-left to the first
  mean,      // elementwise mean (branch pooling)
  upsample,  // nearest 2x
  concat,    // channel concatenation
  maxpool,   // k x k window max
};

std::string to_string(LayerKind k);
LayerKind parse_layer_kind(std::string_view s);

struct LayerDesc {
  std::string name;
  LayerKind kind = LayerKind::conv;
  std::vector<std::string> inputs;
  std::string output;
  int out_channels = 0;  // conv only
  int kernel = 1;
  int stride = 1;
  int padding = 0;
  int dilation = 1;
  bool bias = false;
  std::string shared_group;  // convs in one non-empty group own a single weight set
  std::string component;     // reporting bucket: backbone, fpn, rfp, head
};

struct Graph {
  std::string input = "image";
  int input_channels = 3;
  std::vector<LayerDesc> layers;
};

/// Line-oriented text form: "input <name> channels=<c>" then one
/// "<kind> name=... in=a,b out=... [cout= k= s= p= d= bias= group= component=]" per layer.
Graph parse_graph(const std::string& text);
std::string graph_to_text(const Graph& g);

struct LayerCost {
  std::string name;
  std::string component;
  LayerKind kind = LayerKind::conv;
  int64_t params = 0;       // zero for later members of a shared group
  int64_t macs = 0;
  int64_t elementwise = 0;  // adds, scalings and comparisons outside convs
  int64_t out_c = 0, out_h = 0, out_w = 0;
};

struct CostReport {
  std::vector<LayerCost> layers;
  int64_t params = 0;
  int64_t macs = 0;
  int64_t elementwise = 0;
  int64_t input_h = 0;
  int64_t input_w = 0;

  int64_t flops() const { return 2 * macs; }
  int64_t params_of(std::string_view component) const;
  int64_t macs_of(std::string_view component) const;
};

/// Parameters only (spatial fields left zero).
CostReport count_params(const Graph& g);
/// Parameters plus per-layer MACs at input h x w.
CostReport count_macs(const Graph& g, int64_t h, int64_t w);

/// The network a DetectorConfig builds. The stub backbone is mirrored layer
/// for layer; resnet50 describes a bottleneck ResNet-50 (convs only, batch-norm
/// folded, no classifier). `probe_branch` mirrors Detector::forward's probe.
Graph describe_detector(const DetectorConfig& cfg, std::optional<int> probe_branch = std::nullopt);

/// Input size the network actually sees (stub: input policy; resnet50: as given).
std::pair<int64_t, int64_t> cost_input_size(const DetectorConfig& cfg, int64_t h, int64_t w);
CostReport detector_cost(const DetectorConfig& cfg, int64_t h, int64_t w,
                         std::optional<int> probe_branch = std::nullopt);

enum class AblationAxis { branches, sharing, fusion };
AblationAxis parse_ablation_axis(std::string_view s);

struct AblationRow {
  std::string label;
  CostReport report;
  bool rfp_enabled = true;
  RfpConfig rfp;
  std::optional<int> probe_branch;
};

/// branches: no-RFP baseline, then B = 1..4 (shared, branch pooling).
/// sharing:  baseline, unshared and shared at the base branch count.
/// fusion:   each fusion with all branches, plus single-branch (2) for pool and add.
/// Throws ContractError if shared params vary with B or the B-step in MACs is not constant.
std::vector<AblationRow> ablation_table(const DetectorConfig& base, AblationAxis axis, int64_t h,
                                        int64_t w);

std::string format_table_text(const std::vector<AblationRow>& rows);
std::string format_table_csv(const std::vector<AblationRow>& rows);
/// Per-component breakdown of one report.
std::string format_report_text(const CostReport& r);

}  // namespace rfp
