// SPDX-License-Identifier: Apache-2.0
//
// Dense tensors with tape-free reverse-mode differentiation.
//
// Every op result owns a graph node holding handles to its parents and a
// backward closure. Node ids increase monotonically per thread, so creation
// order is a valid topological order and backward() simply walks reachable
// nodes by descending id.
#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "rfp/errors.hpp"

namespace rfp {

#ifdef RFP_USE_FLOAT
using Real = float;
#else
using Real = double;
#endif

/// Tensor extents, rank 0..4. Feature maps are N x C x H x W.
class Shape {
 public:
  Shape() = default;
  Shape(std::initializer_list<int64_t> dims);
  explicit Shape(std::vector<int64_t> dims);

  int rank() const noexcept { return static_cast<int>(dims_.size()); }
  int64_t operator[](int i) const { return dims_.at(static_cast<size_t>(i)); }
  int64_t numel() const noexcept;
  const std::vector<int64_t>& dims() const noexcept { return dims_; }
  std::string str() const;

  friend bool operator==(const Shape&, const Shape&) = default;

 private:
  std::vector<int64_t> dims_;
};

namespace detail {

struct Node {
  uint64_t id = 0;
  Shape shape;
  std::vector<Real> value;
  std::vector<Real> grad;  // empty until first accumulated into
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<Real>& ensure_grad();
};

uint64_t next_node_id();

}  // namespace detail

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, Real value, bool requires_grad = false);
  static Tensor from(const Shape& shape, std::vector<Real> values, bool requires_grad = false);
  static Tensor scalar(Real value, bool requires_grad = false);

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const Shape& shape() const;
  int64_t dim(int i) const { return shape()[i]; }
  int rank() const { return shape().rank(); }
  int64_t numel() const { return shape().numel(); }
  uint64_t id() const;

  std::span<const Real> values() const;
  /// Direct write access; only meaningful for leaves (parameters, inputs).
  std::span<Real> mutable_values();
  Real item() const;
  Real at(std::initializer_list<int64_t> index) const;

  bool requires_grad() const;
  bool has_grad() const;
  std::span<const Real> grad() const;
  std::span<Real> mutable_grad();
  void zero_grad();
  void clear_grad();

  /// Copy of the values as a new leaf with no history.
  Tensor detach(bool requires_grad = false) const;

  const std::shared_ptr<detail::Node>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  std::shared_ptr<detail::Node> node_;

  friend Tensor make_result(const Shape&, std::vector<Real>, std::vector<Tensor>,
                            std::function<void(detail::Node&)>);
};

/// Builds an op result. When any parent requires grad, the node records the
/// parents and the backward closure; the closure reads `self.grad` and
/// accumulates into the parents' `ensure_grad()` buffers.
Tensor make_result(const Shape& shape, std::vector<Real> values, std::vector<Tensor> parents,
                   std::function<void(detail::Node&)> backward);

/// Reverse-mode sweep from a scalar root. Gradients accumulate (+=) into
/// every reachable node that requires grad, so a leaf used at k call sites
/// receives the sum of its k per-site gradients.
void backward(const Tensor& root);

/// While alive, ops on this thread record no graph history.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

/// Per-thread NaN/Inf check on every op output and on backward gradients.
/// Defaults to on in builds without NDEBUG.
void set_finite_checks(bool enabled);
bool finite_checks();

}  // namespace rfp
