// SPDX-License-Identifier: Apache-2.0
//
// Dilated 2-D cross-correlation kernels, NCHW layout.
//
// `reference` is the plain serial loop nest kept as the testing oracle.
// `parallel` is the production path: im2col plus a blocked GEMM, OpenMP over
// output tiles. Every output element is owned by one task and summed in a
// fixed order, so results do not depend on the thread count. The forward pass
// uses the reference's (ci, kh, kw) order and matches it bit for bit; the
// backward passes sum in GEMM order and agree with the reference to rounding.
#pragma once

#include <cstdint>
#include <span>

#include "rfp/tensor.hpp"

namespace rfp::kernels {

struct ConvGeometry {
  int64_t batch = 1;
  int64_t in_channels = 1;
  int64_t in_h = 1;
  int64_t in_w = 1;
  int64_t out_channels = 1;
  int64_t kernel = 1;
  int64_t stride = 1;
  int64_t padding = 0;
  int64_t dilation = 1;

  /// floor((in + 2p - d(k-1) - 1) / s) + 1; may be <= 0 for invalid configs.
  int64_t out_h() const;
  int64_t out_w() const;
  /// Multiply-accumulates of one forward pass, padded taps included.
  int64_t macs() const;
  void validate() const;
};

namespace reference {

/// Counts every tap visited (padded taps included) into `mac_count` when non-null.
void conv2d_forward(const ConvGeometry& g, std::span<const Real> x, std::span<const Real> w,
                    std::span<const Real> bias, std::span<Real> y, int64_t* mac_count = nullptr);
void conv2d_backward_input(const ConvGeometry& g, std::span<const Real> w,
                           std::span<const Real> dy, std::span<Real> dx);
void conv2d_backward_weight(const ConvGeometry& g, std::span<const Real> x,
                            std::span<const Real> dy, std::span<Real> dw);

}  // namespace reference

namespace parallel {

void conv2d_forward(const ConvGeometry& g, std::span<const Real> x, std::span<const Real> w,
                    std::span<const Real> bias, std::span<Real> y);
/// Accumulates into dx.
void conv2d_backward_input(const ConvGeometry& g, std::span<const Real> w,
                           std::span<const Real> dy, std::span<Real> dx);
/// Accumulates into dw.
void conv2d_backward_weight(const ConvGeometry& g, std::span<const Real> x,
                            std::span<const Real> dy, std::span<Real> dw);

}  // namespace parallel

/// Total forward MACs executed by conv2d ops on this thread since the last reset.
int64_t mac_counter();
void reset_mac_counter();
void add_macs(int64_t n);

/// Applies RFP_NUM_THREADS from the environment, if set. Returns the thread count in use.
int configure_threads_from_env();

}  // namespace rfp::kernels
