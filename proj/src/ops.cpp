// SPDX-License-Identifier: Apache-2.0
#include "rfp/ops.hpp"

#include <string>

#include "rfp/kernels.hpp"

namespace rfp {

namespace {

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ConfigError(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " +
                      b.shape().str());
  }
}

void require_rank4(const Tensor& x, const char* op) {
  if (x.rank() != 4) {
    throw ConfigError(std::string(op) + ": expected NCHW tensor, got " + x.shape().str());
  }
}

void accumulate(detail::Node& parent, std::span<const Real> g, Real factor = Real(1)) {
  auto& pg = parent.ensure_grad();
  for (size_t i = 0; i < pg.size(); ++i) pg[i] += factor * g[i];
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const std::optional<Tensor>& bias,
              Conv2dOptions opts) {
  require_rank4(x, "conv2d");
  if (w.rank() != 4 || w.dim(2) != w.dim(3)) {
    throw ConfigError("conv2d: weight must be [Cout,Cin,k,k], got " + w.shape().str());
  }
  if (x.dim(1) != w.dim(1)) {
    throw ConfigError("conv2d: input has " + std::to_string(x.dim(1)) +
                      " channels, weight expects " + std::to_string(w.dim(1)));
  }
  if (bias && (bias->rank() != 1 || bias->dim(0) != w.dim(0))) {
    throw ConfigError("conv2d: bias shape " + bias->shape().str() + " does not match Cout");
  }
  kernels::ConvGeometry g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0),
                          w.dim(2), opts.stride, opts.padding, opts.dilation};
  g.validate();

  Shape out_shape{g.batch, g.out_channels, g.out_h(), g.out_w()};
  std::vector<Real> y(static_cast<size_t>(out_shape.numel()));
  kernels::parallel::conv2d_forward(g, x.values(), w.values(),
                                    bias ? bias->values() : std::span<const Real>{}, y);
  kernels::add_macs(g.macs());

  std::vector<Tensor> parents{x, w};
  if (bias) parents.push_back(*bias);
  Tensor b = bias.value_or(Tensor{});
  return make_result(out_shape, std::move(y), std::move(parents),
                     [x, w, b, g](detail::Node& self) {
                       if (x.requires_grad()) {
                         kernels::parallel::conv2d_backward_input(g, w.values(), self.grad,
                                                                  x.node()->ensure_grad());
                       }
                       if (w.requires_grad()) {
                         kernels::parallel::conv2d_backward_weight(g, x.values(), self.grad,
                                                                   w.node()->ensure_grad());
                       }
                       if (b.defined() && b.requires_grad()) {
                         auto& bg = b.node()->ensure_grad();
                         const int64_t plane = g.out_h() * g.out_w();
                         for (int64_t n = 0; n < g.batch; ++n) {
                           for (int64_t co = 0; co < g.out_channels; ++co) {
                             const Real* d = self.grad.data() + (n * g.out_channels + co) * plane;
                             Real acc = 0;
                             for (int64_t i = 0; i < plane; ++i) acc += d[i];
                             bg[co] += acc;
                           }
                         }
                       }
                     });
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  auto av = a.values(), bv = b.values();
  std::vector<Real> y(av.size());
  for (size_t i = 0; i < y.size(); ++i) y[i] = av[i] + bv[i];
  return make_result(a.shape(), std::move(y), {a, b}, [a, b](detail::Node& self) {
    if (a.requires_grad()) accumulate(*a.node(), self.grad);
    if (b.requires_grad()) accumulate(*b.node(), self.grad);
  });
}

Tensor relu(const Tensor& x) {
  auto xv = x.values();
  std::vector<Real> y(xv.size());
  for (size_t i = 0; i < y.size(); ++i) y[i] = xv[i] > 0 ? xv[i] : Real(0);
  return make_result(x.shape(), std::move(y), {x}, [x](detail::Node& self) {
    auto xv = x.values();
    auto& g = x.node()->ensure_grad();
    for (size_t i = 0; i < g.size(); ++i) {
      if (xv[i] > 0) g[i] += self.grad[i];
    }
  });
}

Tensor scale(const Tensor& x, Real s) {
  auto xv = x.values();
  std::vector<Real> y(xv.size());
  for (size_t i = 0; i < y.size(); ++i) y[i] = s * xv[i];
  return make_result(x.shape(), std::move(y), {x},
                     [x, s](detail::Node& self) { accumulate(*x.node(), self.grad, s); });
}

namespace {

Tensor weighted_sum_n(std::span<const Tensor> xs, Real factor, const char* op) {
  if (xs.empty()) throw ConfigError(std::string(op) + ": empty operand list");
  for (const auto& t : xs) require_same_shape(xs[0], t, op);
  std::vector<Real> y(static_cast<size_t>(xs[0].numel()), Real(0));
  for (const auto& t : xs) {
    auto v = t.values();
    for (size_t i = 0; i < y.size(); ++i) y[i] += v[i];
  }
  if (factor != Real(1)) {
    for (auto& v : y) v *= factor;
  }
  std::vector<Tensor> parents(xs.begin(), xs.end());
  return make_result(xs[0].shape(), std::move(y), parents,
                     [parents, factor](detail::Node& self) {
                       for (const auto& p : parents) {
                         if (p.requires_grad()) accumulate(*p.node(), self.grad, factor);
                       }
                     });
}

}  // namespace

Tensor mean_n(std::span<const Tensor> xs) {
  if (xs.empty()) throw ConfigError("mean_n: empty operand list");
  for (const auto& t : xs) require_same_shape(xs[0], t, "mean_n");
  const Real factor = Real(1) / static_cast<Real>(xs.size());
  // Elements on which all operands agree are copied, so the mean of identical
  // tensors is exactly that tensor.
  std::vector<std::span<const Real>> vals;
  for (const auto& t : xs) vals.push_back(t.values());
  std::vector<Real> y(static_cast<size_t>(xs[0].numel()));
  for (size_t i = 0; i < y.size(); ++i) {
    const Real first = vals[0][i];
    Real acc = 0;
    bool same = true;
    for (const auto& v_all : vals) {
      const Real v = v_all[i];
      acc += v;
      same = same && v == first;
    }
    y[i] = same ? first : acc * factor;
  }
  std::vector<Tensor> parents(xs.begin(), xs.end());
  return make_result(xs[0].shape(), std::move(y), parents,
                     [parents, factor](detail::Node& self) {
                       for (const auto& p : parents) {
                         if (p.requires_grad()) accumulate(*p.node(), self.grad, factor);
                       }
                     });
}

Tensor sum_n(std::span<const Tensor> xs) { return weighted_sum_n(xs, Real(1), "sum_n"); }

Tensor sum(const Tensor& x) {
  Real acc = 0;
  for (Real v : x.values()) acc += v;
  return make_result(Shape{}, {acc}, {x}, [x](detail::Node& self) {
    auto& g = x.node()->ensure_grad();
    const Real s = self.grad[0];
    for (auto& v : g) v += s;
  });
}

Tensor dot_constant(const Tensor& x, std::span<const Real> weights) {
  if (static_cast<int64_t>(weights.size()) != x.numel()) {
    throw ConfigError("dot_constant: weight count does not match " + x.shape().str());
  }
  std::vector<Real> wcopy(weights.begin(), weights.end());
  Real acc = 0;
  auto xv = x.values();
  for (size_t i = 0; i < wcopy.size(); ++i) acc += xv[i] * wcopy[i];
  return make_result(Shape{}, {acc}, {x}, [x, wcopy](detail::Node& self) {
    auto& g = x.node()->ensure_grad();
    const Real s = self.grad[0];
    for (size_t i = 0; i < g.size(); ++i) g[i] += s * wcopy[i];
  });
}

Tensor upsample_nearest_2x(const Tensor& x) {
  require_rank4(x, "upsample_nearest_2x");
  const int64_t planes = x.dim(0) * x.dim(1), h = x.dim(2), w = x.dim(3);
  const int64_t oh = 2 * h, ow = 2 * w;
  auto xv = x.values();
  std::vector<Real> y(static_cast<size_t>(planes * oh * ow));
  for (int64_t p = 0; p < planes; ++p) {
    for (int64_t i = 0; i < oh; ++i) {
      for (int64_t j = 0; j < ow; ++j) {
        y[(p * oh + i) * ow + j] = xv[(p * h + i / 2) * w + j / 2];
      }
    }
  }
  return make_result(Shape{x.dim(0), x.dim(1), oh, ow}, std::move(y), {x},
                     [x, planes, h, w](detail::Node& self) {
                       auto& g = x.node()->ensure_grad();
                       const int64_t oh = 2 * h, ow = 2 * w;
                       for (int64_t p = 0; p < planes; ++p) {
                         for (int64_t i = 0; i < oh; ++i) {
                           for (int64_t j = 0; j < ow; ++j) {
                             g[(p * h + i / 2) * w + j / 2] += self.grad[(p * oh + i) * ow + j];
                           }
                         }
                       }
                     });
}

namespace {

// Copies the overlapping top-left window between two plane geometries.
Tensor window_copy(const Tensor& x, int64_t h, int64_t w, const char* op) {
  require_rank4(x, op);
  const int64_t planes = x.dim(0) * x.dim(1), ih = x.dim(2), iw = x.dim(3);
  const int64_t ch = std::min(h, ih), cw = std::min(w, iw);
  auto xv = x.values();
  std::vector<Real> y(static_cast<size_t>(planes * h * w), Real(0));
  for (int64_t p = 0; p < planes; ++p)
    for (int64_t i = 0; i < ch; ++i)
      for (int64_t j = 0; j < cw; ++j) y[(p * h + i) * w + j] = xv[(p * ih + i) * iw + j];
  return make_result(Shape{x.dim(0), x.dim(1), h, w}, std::move(y), {x},
                     [x, planes, ih, iw, h, w, ch, cw](detail::Node& self) {
                       auto& g = x.node()->ensure_grad();
                       for (int64_t p = 0; p < planes; ++p)
                         for (int64_t i = 0; i < ch; ++i)
                           for (int64_t j = 0; j < cw; ++j)
                             g[(p * ih + i) * iw + j] += self.grad[(p * h + i) * w + j];
                     });
}

}  // namespace

Tensor crop(const Tensor& x, int64_t h, int64_t w) {
  require_rank4(x, "crop");
  if (h < 1 || w < 1 || h > x.dim(2) || w > x.dim(3)) {
    throw ConfigError("crop: window " + std::to_string(h) + "x" + std::to_string(w) +
                      " does not fit " + x.shape().str());
  }
  return window_copy(x, h, w, "crop");
}

Tensor pad_bottom_right(const Tensor& x, int64_t h, int64_t w) {
  require_rank4(x, "pad_bottom_right");
  if (h < x.dim(2) || w < x.dim(3)) {
    throw ConfigError("pad_bottom_right: target smaller than " + x.shape().str());
  }
  return window_copy(x, h, w, "pad_bottom_right");
}

Tensor concat_channels(std::span<const Tensor> xs) {
  if (xs.empty()) throw ConfigError("concat_channels: empty operand list");
  for (const auto& t : xs) {
    require_rank4(t, "concat_channels");
    if (t.dim(0) != xs[0].dim(0) || t.dim(2) != xs[0].dim(2) || t.dim(3) != xs[0].dim(3)) {
      throw ConfigError("concat_channels: N/H/W mismatch " + t.shape().str() + " vs " +
                        xs[0].shape().str());
    }
  }
  const int64_t n = xs[0].dim(0), plane = xs[0].dim(2) * xs[0].dim(3);
  int64_t total_c = 0;
  for (const auto& t : xs) total_c += t.dim(1);
  std::vector<Real> y(static_cast<size_t>(n * total_c * plane));
  int64_t c0 = 0;
  for (const auto& t : xs) {
    auto v = t.values();
    const int64_t c = t.dim(1);
    for (int64_t b = 0; b < n; ++b) {
      std::copy(v.begin() + b * c * plane, v.begin() + (b + 1) * c * plane,
                y.begin() + (b * total_c + c0) * plane);
    }
    c0 += c;
  }
  std::vector<Tensor> parents(xs.begin(), xs.end());
  return make_result(Shape{n, total_c, xs[0].dim(2), xs[0].dim(3)}, std::move(y), parents,
                     [parents, n, total_c, plane](detail::Node& self) {
                       int64_t c0 = 0;
                       for (const auto& t : parents) {
                         const int64_t c = t.dim(1);
                         if (t.requires_grad()) {
                           auto& g = t.node()->ensure_grad();
                           for (int64_t b = 0; b < n; ++b)
                             for (int64_t i = 0; i < c * plane; ++i)
                               g[b * c * plane + i] += self.grad[(b * total_c + c0) * plane + i];
                         }
                         c0 += c;
                       }
                     });
}

Tensor flatten_levels(std::span<const Tensor> maps, int64_t k) {
  if (maps.empty()) throw ConfigError("flatten_levels: no maps");
  const int64_t n = maps[0].dim(0);
  int64_t rows = 0;
  for (const auto& m : maps) {
    require_rank4(m, "flatten_levels");
    if (m.dim(0) != n || m.dim(1) != k) {
      throw ConfigError("flatten_levels: expected [" + std::to_string(n) + "," +
                        std::to_string(k) + ",H,W], got " + m.shape().str());
    }
    rows += m.dim(2) * m.dim(3);
  }
  std::vector<Real> y(static_cast<size_t>(n * rows * k));
  int64_t r0 = 0;
  for (const auto& m : maps) {
    const int64_t plane = m.dim(2) * m.dim(3);
    auto v = m.values();
    for (int64_t b = 0; b < n; ++b)
      for (int64_t c = 0; c < k; ++c)
        for (int64_t i = 0; i < plane; ++i)
          y[(b * rows + r0 + i) * k + c] = v[(b * k + c) * plane + i];
    r0 += plane;
  }
  std::vector<Tensor> parents(maps.begin(), maps.end());
  return make_result(Shape{n, rows, k}, std::move(y), parents,
                     [parents, n, rows, k](detail::Node& self) {
                       int64_t r0 = 0;
                       for (const auto& m : parents) {
                         const int64_t plane = m.dim(2) * m.dim(3);
                         if (m.requires_grad()) {
                           auto& g = m.node()->ensure_grad();
                           for (int64_t b = 0; b < n; ++b)
                             for (int64_t c = 0; c < k; ++c)
                               for (int64_t i = 0; i < plane; ++i)
                                 g[(b * k + c) * plane + i] +=
                                     self.grad[(b * rows + r0 + i) * k + c];
                         }
                         r0 += plane;
                       }
                     });
}

}  // namespace rfp
