// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <span>
#include <vector>

#include "rfp/tensor.hpp"

namespace rfp {

struct Conv2dOptions {
  int stride = 1;
  int padding = 0;
  int dilation = 1;
};

/// Dilated cross-correlation. x: [N,Cin,H,W], w: [Cout,Cin,k,k], bias: [Cout].
/// Adds the executed MACs to kernels::mac_counter().
Tensor conv2d(const Tensor& x, const Tensor& w, const std::optional<Tensor>& bias,
              Conv2dOptions opts = {});

Tensor add(const Tensor& a, const Tensor& b);
Tensor relu(const Tensor& x);
Tensor scale(const Tensor& x, Real s);

/// (1/B) * sum of xs; all operands must share one shape.
Tensor mean_n(std::span<const Tensor> xs);
/// Plain sum of same-shape operands.
Tensor sum_n(std::span<const Tensor> xs);

/// Reduces every element to a scalar.
Tensor sum(const Tensor& x);
/// sum(x * weights) with a constant weight vector, a smooth scalar readout.
Tensor dot_constant(const Tensor& x, std::span<const Real> weights);

/// Nearest-neighbour 2x: every cell becomes a 2x2 block.
Tensor upsample_nearest_2x(const Tensor& x);

/// Keeps the top-left [h, w] window of a feature map.
Tensor crop(const Tensor& x, int64_t h, int64_t w);

/// Zero-pads a feature map on the bottom and right up to [h, w].
Tensor pad_bottom_right(const Tensor& x, int64_t h, int64_t w);

/// Channel concatenation of feature maps that agree on N, H, W.
Tensor concat_channels(std::span<const Tensor> xs);

/// Flattens per-level head maps [N, k, H_l, W_l] into rows [N, sum_l H_l*W_l, k],
/// level-major then row-major, matching anchor order.
Tensor flatten_levels(std::span<const Tensor> maps, int64_t k);

}  // namespace rfp
