// SPDX-License-Identifier: Apache-2.0
//
// Receptive field pyramid block: B parallel 3x3 dilated convolutions over the
// same input, each with an identity shortcut,
//
//   y_i = conv(x, W_i, dilation d_i, padding d_i) + x,
//
// fused back to one map of the input's shape. With weight sharing all W_i are
// one tensor and only the dilation differs between branches.
#pragma once

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "rfp/parameter.hpp"
#include "rfp/tensor.hpp"

namespace rfp {

enum class Fusion {
  branch_pool,  // elementwise mean over branches
  add,          // elementwise sum over branches
  concat,       // channel concat followed by a 1x1 (B*C -> C) projection
};

std::string to_string(Fusion f);
Fusion parse_fusion(std::string_view s);

/// Dilation schedule used for a branch count: 1, 3, 5, ... (2i - 1).
std::vector<int> default_dilations(int branches);

struct RfpConfig {
  int branches = 3;
  std::vector<int> dilations{1, 3, 5};
  bool share_weights = true;
  Fusion fusion = Fusion::branch_pool;
  std::optional<int> single_branch;  // 1-based branch evaluated alone at inference
  int channels = 32;
  int kernel = 3;
  bool use_bias = false;
  bool post_relu = false;

  static RfpConfig with_branches(int branches, int channels);

  /// Throws ConfigError on any violated invariant, including single-branch
  /// inference requested for add or concat fusion.
  void validate() const;
  int weight_sets() const { return share_weights ? 1 : branches; }
};

struct RfpParams {
  std::vector<Tensor> weights;  // 1 tensor [C,C,k,k] if shared, else B
  std::vector<Tensor> biases;   // parallel to weights, empty unless use_bias
  std::optional<Tensor> concat_proj;  // [C, B*C, 1, 1] iff fusion == concat

  /// Registers parameters under `prefix` ("rfp/p3/...").
  static RfpParams create(const RfpConfig& cfg, ParameterStore& store, const std::string& prefix,
                          std::mt19937_64& rng, double gain = 1.0);
};

/// Output of branch `branch_index` (1-based) alone: conv(x, W_i, d_i) + x.
/// No fusion-mode check; this is also the probe used to evaluate single-branch
/// behaviour of modules trained with add fusion.
Tensor rfp_branch(const Tensor& x, const RfpConfig& cfg, const RfpParams& params, int branch_index);

/// Full block forward. Output shape always equals input shape.
Tensor rfp_forward(const Tensor& x, const RfpConfig& cfg, const RfpParams& params);

/// Switches a branch-pool block to single-branch inference on `branch_index`.
RfpConfig fold_for_inference(RfpConfig cfg, int branch_index = 2);

/// Parameters owned by one block.
int64_t rfp_param_count(const RfpConfig& cfg);

}  // namespace rfp
