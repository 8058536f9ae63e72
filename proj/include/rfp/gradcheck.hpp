// SPDX-License-Identifier: Apache-2.0
//
// Central finite-difference gradient checks, grouped by op family.
//
// Relative error per coordinate is |a - n| / max(|a|, |n|, floor). When a
// coordinate fails at eps it is re-measured at eps/2; if the two numeric
// estimates disagree with each other by more than the tolerance the function
// is not smooth there (a ReLU kink or a hard-negative reselection inside the
// stencil) and the coordinate is counted as skipped rather than judged.
#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "rfp/detector.hpp"
#include "rfp/tensor.hpp"

namespace rfp {

struct GradcheckOptions {
  double eps = 1e-5;
  double tolerance = 1e-6;
  double floor = 1e-3;
  int coords_per_seed = 24;
  double max_skip_fraction = 0.01;
};

struct GradcheckStats {
  std::string family;
  int seeds = 0;
  int64_t coords = 0;
  int64_t skipped = 0;
  double max_rel_error = 0;
  double tolerance = 0;
  double max_skip_fraction = 0;
  std::string worst;  // description of the worst coordinate

  bool passed() const;
  void merge(const GradcheckStats& other);
};

/// Checks d f / d inputs at `coords` randomly drawn coordinates. `f` must
/// recompute from the inputs' current values each call.
GradcheckStats check_gradient(const std::string& family, const std::function<Tensor()>& f,
                              const std::vector<Tensor>& inputs, std::mt19937_64& rng,
                              const GradcheckOptions& opts);

std::vector<std::string> gradcheck_families();

/// One family over seeds [first_seed, first_seed + seeds).
GradcheckStats run_gradcheck_family(const std::string& family, int seeds, uint64_t first_seed,
                                    const GradcheckOptions& opts);

/// Full detector: scalar readout of the post-RFP pyramid and the detection
/// loss, w.r.t. parameters and input pixels, on `input_hw` x `input_hw` inputs.
GradcheckStats run_model_gradcheck(const DetectorConfig& cfg, int input_hw, int seeds,
                                   uint64_t first_seed, const GradcheckOptions& opts);

/// A width-4, 4-input-channel model under the floor input policy, small enough
/// for many seeds at 16 x 16.
DetectorConfig tiny_gradcheck_config();

}  // namespace rfp
