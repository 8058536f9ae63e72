// SPDX-License-Identifier: Apache-2.0
//
// Stub residual backbone (C2..C5 at strides 4, 8, 16, 32), FPN top-down
// merge into P2..P5, stride-2 convs for P6/P7, and one RFP block per level.
#pragma once

#include <array>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "rfp/ops.hpp"
#include "rfp/parameter.hpp"
#include "rfp/rfp_block.hpp"

namespace rfp {

enum class InputPolicy {
  pad,     // zero-pad bottom/right up to a multiple of 128 and record it
  strict,  // reject sizes not divisible by 128
  floor,   // accept any size; conv arithmetic plus top-left crop-to-match
};

std::string to_string(InputPolicy p);
InputPolicy parse_input_policy(std::string_view s);

struct BackboneSpec {
  int in_channels = 1;
  int stem_channels = 8;
  std::array<int, 4> stage_channels{16, 24, 32, 48};
  std::array<int, 4> blocks{1, 1, 1, 1};
  InputPolicy input_policy = InputPolicy::pad;

  void validate() const;
};

struct PyramidSpec {
  static constexpr std::array<int, 6> kStrides{4, 8, 16, 32, 64, 128};
  int out_channels = 32;
  int levels = 6;  // P2..P(levels+1); 4..6

  void validate() const;
  int stride(int level_index) const { return kStrides.at(static_cast<size_t>(level_index)); }
};

/// One convolution with its parameters and geometry.
struct ConvLayer {
  Tensor weight;
  std::optional<Tensor> bias;
  Conv2dOptions opts;

  static ConvLayer create(ParameterStore& store, const std::string& prefix, int in_c, int out_c,
                          int kernel, Conv2dOptions opts, bool bias, std::mt19937_64& rng,
                          double gain = 1.0);
  Tensor operator()(const Tensor& x) const { return conv2d(x, weight, bias, opts); }
};

struct ResidualBlock {
  ConvLayer conv1;
  ConvLayer conv2;
};

struct BackboneParams {
  ConvLayer stem1;  // stride 2
  ConvLayer stem2;  // stride 2
  std::array<std::optional<ConvLayer>, 4> down;  // stride-2 entry of stages 1..3
  std::array<std::vector<ResidualBlock>, 4> blocks;

  static BackboneParams create(const BackboneSpec& spec, ParameterStore& store,
                               std::mt19937_64& rng);
};

struct BackboneOutput {
  std::array<Tensor, 4> c;  // C2..C5
  int64_t pad_h = 0;        // zero rows/cols added under InputPolicy::pad
  int64_t pad_w = 0;
};

/// Applies the input policy and returns the (H, W) the network actually sees.
std::pair<int64_t, int64_t> effective_input_size(const BackboneSpec& spec, int64_t h, int64_t w);

BackboneOutput backbone_forward(const Tensor& image, const BackboneSpec& spec,
                                const BackboneParams& params);

struct FpnParams {
  std::array<ConvLayer, 4> lateral;  // 1x1, C_l -> out
  std::array<ConvLayer, 4> smooth;   // 3x3 after each merge
  std::optional<ConvLayer> p6;       // 3x3 stride 2 on P5
  std::optional<ConvLayer> p7;       // 3x3 stride 2 on P6

  static FpnParams create(const BackboneSpec& backbone, const PyramidSpec& spec,
                          ParameterStore& store, std::mt19937_64& rng);
};

/// P2..P(levels+1). Top-down maps larger than the lateral map are cropped
/// top-left to match.
std::vector<Tensor> build_pyramid(const std::array<Tensor, 4>& c, const PyramidSpec& spec,
                                  const FpnParams& params);

/// One independently parameterised RFP block per level. `probe_branch`
/// evaluates a single branch regardless of fusion mode (ablation only).
std::vector<Tensor> attach_rfp(const std::vector<Tensor>& pyramid, const RfpConfig& cfg,
                               std::span<const RfpParams> params,
                               std::optional<int> probe_branch = std::nullopt);

/// Spatial size of every pyramid level for an input of h x w (after the input policy).
std::vector<std::pair<int64_t, int64_t>> pyramid_level_sizes(const BackboneSpec& backbone,
                                                             const PyramidSpec& spec, int64_t h,
                                                             int64_t w);

}  // namespace rfp
