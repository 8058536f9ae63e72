// SPDX-License-Identifier: Apache-2.0
#include "rfp/parameter.hpp"

#include <algorithm>
#include <cmath>
#include <utility>

namespace rfp {

Tensor ParameterStore::add(const std::string& name, Tensor value, int shared_ref_count) {
  if (find(name)) throw ConfigError("duplicate parameter name: " + name);
  if (shared_ref_count < 1) throw ContractError("shared_ref_count must be >= 1 for " + name);
  Tensor t = value.requires_grad() ? value : value.detach(true);
  params_.push_back(Parameter{name, t, shared_ref_count, {}});
  return t;
}

Tensor ParameterStore::add_normal(const std::string& name, const Shape& shape, int64_t fan_in,
                                  std::mt19937_64& rng, double gain, int shared_ref_count) {
  std::normal_distribution<double> dist(0.0, gain * std::sqrt(2.0 / static_cast<double>(fan_in)));
  std::vector<Real> v(static_cast<size_t>(shape.numel()));
  for (auto& x : v) x = static_cast<Real>(dist(rng));
  return add(name, Tensor::from(shape, std::move(v), true), shared_ref_count);
}

Tensor ParameterStore::add_zeros(const std::string& name, const Shape& shape,
                                 int shared_ref_count) {
  return add(name, Tensor::zeros(shape, true), shared_ref_count);
}

const Parameter* ParameterStore::find(const std::string& name) const {
  auto it = std::find_if(params_.begin(), params_.end(),
                         [&](const Parameter& p) { return p.name == name; });
  return it == params_.end() ? nullptr : &*it;
}

Parameter* ParameterStore::find(const std::string& name) {
  return const_cast<Parameter*>(std::as_const(*this).find(name));
}

const Parameter& ParameterStore::at(const std::string& name) const {
  const Parameter* p = find(name);
  if (!p) throw ConfigError("unknown parameter: " + name);
  return *p;
}

int64_t ParameterStore::total_elements() const {
  int64_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

void ParameterStore::zero_grad() {
  for (auto& p : params_) p.tensor.zero_grad();
}

void ParameterStore::clear_grad() {
  for (auto& p : params_) p.tensor.clear_grad();
}

double sgd_step(std::span<Parameter> params, double lr, double momentum, double weight_decay,
                double max_grad_norm) {
  double sq = 0;
  for (auto& p : params) {
    if (!p.tensor.has_grad()) throw ContractError("sgd_step: parameter " + p.name + " has no grad");
    for (Real g : p.tensor.grad()) sq += static_cast<double>(g) * g;
  }
  const double norm = std::sqrt(sq);
  if (!std::isfinite(norm)) throw ContractError("sgd_step: gradient norm is not finite");
  const Real scale = static_cast<Real>(max_grad_norm > 0 && norm > max_grad_norm ? max_grad_norm / norm : 1.0);
  for (auto& p : params) {
    auto w = p.tensor.mutable_values();
    auto g = p.tensor.grad();
    if (p.velocity.empty()) p.velocity.assign(w.size(), Real(0));
    for (size_t i = 0; i < w.size(); ++i) {
      const Real d = scale * g[i] + static_cast<Real>(weight_decay) * w[i];
      p.velocity[i] = static_cast<Real>(momentum) * p.velocity[i] + d;
      w[i] -= static_cast<Real>(lr) * p.velocity[i];
    }
    p.tensor.clear_grad();
  }
  return norm;
}

}  // namespace rfp
