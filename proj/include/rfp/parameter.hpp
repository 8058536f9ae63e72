// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "rfp/tensor.hpp"

namespace rfp {

/// A trainable leaf tensor with a hierarchical name ("fpn/p3/smooth/weight").
/// `shared_ref_count` is the number of call sites that read it in one forward
/// pass; backward() leaves the sum of the per-site gradients in its grad.
struct Parameter {
  std::string name;
  Tensor tensor;
  int shared_ref_count = 1;
  std::vector<Real> velocity;  // SGD momentum buffer, empty until first step
};

class ParameterStore {
 public:
  /// Registers a new parameter; names must be unique.
  Tensor add(const std::string& name, Tensor value, int shared_ref_count = 1);

  /// He-normal initialisation, std = gain * sqrt(2 / fan_in).
  Tensor add_normal(const std::string& name, const Shape& shape, int64_t fan_in,
                    std::mt19937_64& rng, double gain = 1.0, int shared_ref_count = 1);
  Tensor add_zeros(const std::string& name, const Shape& shape, int shared_ref_count = 1);

  const Parameter* find(const std::string& name) const;
  Parameter* find(const std::string& name);
  const Parameter& at(const std::string& name) const;

  std::span<Parameter> all() { return params_; }
  std::span<const Parameter> all() const { return params_; }
  size_t size() const { return params_.size(); }

  int64_t total_elements() const;
  void zero_grad();
  void clear_grad();

 private:
  std::vector<Parameter> params_;
};

/// v <- momentum * v + (c * g + weight_decay * p);  p <- p - lr * v;  then grads are cleared.
/// c = min(1, max_grad_norm / |g|) over the global L2 norm when max_grad_norm > 0, else 1.
/// Returns |g| before clipping. Throws ContractError if any parameter has no
/// gradient or the gradient is not finite; weights are untouched in that case.
double sgd_step(std::span<Parameter> params, double lr, double momentum, double weight_decay = 0.0,
                double max_grad_norm = 0.0);

}  // namespace rfp
