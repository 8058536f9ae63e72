// SPDX-License-Identifier: Apache-2.0
#include "rfp/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <cstdlib>
#include <cstring>
#include <string>
#include <vector>

namespace rfp::kernels {

int64_t ConvGeometry::out_h() const {
  return (in_h + 2 * padding - dilation * (kernel - 1) - 1) / stride + 1;
}

int64_t ConvGeometry::out_w() const {
  return (in_w + 2 * padding - dilation * (kernel - 1) - 1) / stride + 1;
}

int64_t ConvGeometry::macs() const {
  return batch * out_channels * in_channels * kernel * kernel * out_h() * out_w();
}

void ConvGeometry::validate() const {
  if (kernel < 1 || stride < 1 || dilation < 1 || padding < 0) {
    throw ConfigError("conv2d: kernel, stride and dilation must be >= 1 and padding >= 0");
  }
  // Guard the numerator before dividing: C++ division truncates toward zero.
  if (in_h + 2 * padding - dilation * (kernel - 1) - 1 < 0 ||
      in_w + 2 * padding - dilation * (kernel - 1) - 1 < 0) {
    throw ConfigError("conv2d: non-positive output size for input " + std::to_string(in_h) + "x" +
                      std::to_string(in_w) + " with dilated extent " +
                      std::to_string(dilation * (kernel - 1) + 1));
  }
}

namespace {

thread_local int64_t g_macs = 0;

// Output positions o in [0, out) whose input coordinate o*s + off lies in [0, in).
struct Range {
  int64_t lo;
  int64_t hi;  // exclusive
};

inline Range valid_range(int64_t in, int64_t out, int64_t stride, int64_t off) {
  int64_t lo = off >= 0 ? 0 : (-off + stride - 1) / stride;
  int64_t last = in - 1 - off;
  int64_t hi = last < 0 ? 0 : last / stride + 1;
  hi = std::min(hi, out);
  return {lo, std::max(lo, hi)};
}

}  // namespace

namespace reference {

void conv2d_forward(const ConvGeometry& g, std::span<const Real> x, std::span<const Real> w,
                    std::span<const Real> bias, std::span<Real> y, int64_t* mac_count) {
  const int64_t ho = g.out_h(), wo = g.out_w();
  for (int64_t n = 0; n < g.batch; ++n) {
    for (int64_t co = 0; co < g.out_channels; ++co) {
      for (int64_t oh = 0; oh < ho; ++oh) {
        for (int64_t ow = 0; ow < wo; ++ow) {
          Real acc = bias.empty() ? Real(0) : bias[co];
          for (int64_t ci = 0; ci < g.in_channels; ++ci) {
            for (int64_t kh = 0; kh < g.kernel; ++kh) {
              for (int64_t kw = 0; kw < g.kernel; ++kw) {
                if (mac_count) ++*mac_count;
                int64_t ih = oh * g.stride - g.padding + kh * g.dilation;
                int64_t iw = ow * g.stride - g.padding + kw * g.dilation;
                if (ih < 0 || ih >= g.in_h || iw < 0 || iw >= g.in_w) continue;
                acc += w[((co * g.in_channels + ci) * g.kernel + kh) * g.kernel + kw] *
                       x[((n * g.in_channels + ci) * g.in_h + ih) * g.in_w + iw];
              }
            }
          }
          y[((n * g.out_channels + co) * ho + oh) * wo + ow] = acc;
        }
      }
    }
  }
}

void conv2d_backward_input(const ConvGeometry& g, std::span<const Real> w,
                           std::span<const Real> dy, std::span<Real> dx) {
  const int64_t ho = g.out_h(), wo = g.out_w();
  for (int64_t n = 0; n < g.batch; ++n)
    for (int64_t co = 0; co < g.out_channels; ++co)
      for (int64_t ci = 0; ci < g.in_channels; ++ci)
        for (int64_t kh = 0; kh < g.kernel; ++kh)
          for (int64_t kw = 0; kw < g.kernel; ++kw)
            for (int64_t oh = 0; oh < ho; ++oh)
              for (int64_t ow = 0; ow < wo; ++ow) {
                int64_t ih = oh * g.stride - g.padding + kh * g.dilation;
                int64_t iw = ow * g.stride - g.padding + kw * g.dilation;
                if (ih < 0 || ih >= g.in_h || iw < 0 || iw >= g.in_w) continue;
                dx[((n * g.in_channels + ci) * g.in_h + ih) * g.in_w + iw] +=
                    w[((co * g.in_channels + ci) * g.kernel + kh) * g.kernel + kw] *
                    dy[((n * g.out_channels + co) * ho + oh) * wo + ow];
              }
}

void conv2d_backward_weight(const ConvGeometry& g, std::span<const Real> x,
                            std::span<const Real> dy, std::span<Real> dw) {
  const int64_t ho = g.out_h(), wo = g.out_w();
  for (int64_t n = 0; n < g.batch; ++n)
    for (int64_t co = 0; co < g.out_channels; ++co)
      for (int64_t ci = 0; ci < g.in_channels; ++ci)
        for (int64_t kh = 0; kh < g.kernel; ++kh)
          for (int64_t kw = 0; kw < g.kernel; ++kw)
            for (int64_t oh = 0; oh < ho; ++oh)
              for (int64_t ow = 0; ow < wo; ++ow) {
                int64_t ih = oh * g.stride - g.padding + kh * g.dilation;
                int64_t iw = ow * g.stride - g.padding + kw * g.dilation;
                if (ih < 0 || ih >= g.in_h || iw < 0 || iw >= g.in_w) continue;
                dw[((co * g.in_channels + ci) * g.kernel + kh) * g.kernel + kw] +=
                    x[((n * g.in_channels + ci) * g.in_h + ih) * g.in_w + iw] *
                    dy[((n * g.out_channels + co) * ho + oh) * wo + ow];
              }
}

}  // namespace reference

namespace parallel {

namespace {

int64_t taps(const ConvGeometry& g) { return g.in_channels * g.kernel * g.kernel; }

// Unfolds one image into rows r = (ci, kh, kw) of out_h * out_w samples,
// zero where the tap falls into padding.
void im2col(const ConvGeometry& g, const Real* in, Real* col) {
  const int64_t ho = g.out_h(), wo = g.out_w(), plane = ho * wo;
  const int64_t k = g.kernel, s = g.stride;
#pragma omp parallel for schedule(static)
  for (int64_t r = 0; r < taps(g); ++r) {
    const int64_t ci = r / (k * k), kh = r / k % k, kw = r % k;
    const int64_t off_h = kh * g.dilation - g.padding, off_w = kw * g.dilation - g.padding;
    const Range rh = valid_range(g.in_h, ho, s, off_h);
    const Range rw = valid_range(g.in_w, wo, s, off_w);
    Real* dst = col + r * plane;
    std::fill(dst, dst + plane, Real(0));
    const Real* src = in + ci * g.in_h * g.in_w;
    for (int64_t oh = rh.lo; oh < rh.hi; ++oh) {
      const Real* row = src + (oh * s + off_h) * g.in_w + off_w;
      Real* out = dst + oh * wo;
      for (int64_t ow = rw.lo; ow < rw.hi; ++ow) out[ow] = row[ow * s];
    }
  }
}

// Adds rows of `col` back onto the image they were unfolded from, taps in
// (kh, kw) order for every input element.
void col2im_add(const ConvGeometry& g, const Real* col, Real* in) {
  const int64_t ho = g.out_h(), wo = g.out_w(), plane = ho * wo;
  const int64_t k = g.kernel, s = g.stride;
#pragma omp parallel for schedule(static)
  for (int64_t ci = 0; ci < g.in_channels; ++ci) {
    Real* dst = in + ci * g.in_h * g.in_w;
    for (int64_t kh = 0; kh < k; ++kh) {
      const int64_t off_h = kh * g.dilation - g.padding;
      const Range rh = valid_range(g.in_h, ho, s, off_h);
      for (int64_t kw = 0; kw < k; ++kw) {
        const int64_t off_w = kw * g.dilation - g.padding;
        const Range rw = valid_range(g.in_w, wo, s, off_w);
        const Real* src = col + ((ci * k + kh) * k + kw) * plane;
        for (int64_t oh = rh.lo; oh < rh.hi; ++oh) {
          Real* row = dst + (oh * s + off_h) * g.in_w + off_w;
          const Real* c = src + oh * wo;
          for (int64_t ow = rw.lo; ow < rw.hi; ++ow) row[ow * s] += c[ow];
        }
      }
    }
  }
}

#if defined(__AVX__)
// Four adjacent columns of C as one vector.
using Lanes = Real __attribute__((vector_size(4 * sizeof(Real))));

inline Lanes load(const Real* p) {
  Lanes v;
  std::memcpy(&v, p, sizeof v);
  return v;
}

inline void store(Real* p, Lanes v) { std::memcpy(p, &v, sizeof v); }
#endif

// C(i, j) += sum_k A(i, k) * B(k, j), where A(i, k) = a[i * ai + k * ak] and
// B is row-major with leading dimension ldb. Each C element is owned by one
// task and accumulated from its initial value in ascending k.
void gemm_acc(int64_t m, int64_t n, int64_t kdim, const Real* a, int64_t ai, int64_t ak, const Real* b,
              int64_t ldb, Real* c, int64_t ldc) {
  constexpr int64_t mr = 4, nr = 4, nc = 64;
  const int64_t mblocks = (m + mr - 1) / mr, nchunks = (n + nc - 1) / nc;
  std::vector<Real> pack(static_cast<size_t>(mblocks * mr * kdim), Real(0));
  for (int64_t ib = 0; ib < mblocks; ++ib)
    for (int64_t k = 0; k < kdim; ++k)
      for (int64_t i = 0; i < mr && ib * mr + i < m; ++i)
        pack[static_cast<size_t>((ib * kdim + k) * mr + i)] = a[(ib * mr + i) * ai + k * ak];

// B is copied per column chunk into contiguous k-major panels of nr columns;
// reading it in place walks one cache set when ldb is a large power of two.
#pragma omp parallel
  {
    std::vector<Real> bpack(static_cast<size_t>(kdim * nc));
#pragma omp for schedule(static)
    for (int64_t jc = 0; jc < nchunks; ++jc) {
      const int64_t jbeg = jc * nc, jend = std::min(n, jbeg + nc);
      for (int64_t j0 = jbeg; j0 < jend; j0 += nr) {
        Real* panel = bpack.data() + (j0 - jbeg) * kdim;
        const int64_t nj = std::min(nr, jend - j0);
        for (int64_t k = 0; k < kdim; ++k)
          for (int64_t j = 0; j < nr; ++j) panel[k * nr + j] = j < nj ? b[k * ldb + j0 + j] : Real(0);
      }
      for (int64_t ib = 0; ib < mblocks; ++ib) {
        const Real* ap = pack.data() + ib * kdim * mr;
        const int64_t i0 = ib * mr, mi = std::min(mr, m - i0);
        for (int64_t j0 = jbeg; j0 < jend; j0 += nr) {
          const Real* panel = bpack.data() + (j0 - jbeg) * kdim;
          const int64_t nj = std::min(nr, jend - j0);
          if (mi == mr && nj == nr) {
#if defined(__AVX__)
            Lanes acc[mr];
            for (int64_t i = 0; i < mr; ++i) acc[i] = load(c + (i0 + i) * ldc + j0);
            for (int64_t k = 0; k < kdim; ++k) {
              const Lanes bk = load(panel + k * nr);
              const Real* ak_ = ap + k * mr;
              acc[0] += ak_[0] * bk;
              acc[1] += ak_[1] * bk;
              acc[2] += ak_[2] * bk;
              acc[3] += ak_[3] * bk;
            }
            for (int64_t i = 0; i < mr; ++i) store(c + (i0 + i) * ldc + j0, acc[i]);
#else
            Real acc[mr][nr];
            for (int64_t i = 0; i < mr; ++i)
              for (int64_t j = 0; j < nr; ++j) acc[i][j] = c[(i0 + i) * ldc + j0 + j];
            for (int64_t k = 0; k < kdim; ++k) {
              const Real* bk = panel + k * nr;
              const Real* ak_ = ap + k * mr;
              for (int64_t i = 0; i < mr; ++i)
                for (int64_t j = 0; j < nr; ++j) acc[i][j] += ak_[i] * bk[j];
            }
            for (int64_t i = 0; i < mr; ++i)
              for (int64_t j = 0; j < nr; ++j) c[(i0 + i) * ldc + j0 + j] = acc[i][j];
#endif
          } else {
            for (int64_t i = 0; i < mi; ++i)
              for (int64_t j = 0; j < nj; ++j) {
                Real acc = c[(i0 + i) * ldc + j0 + j];
                for (int64_t k = 0; k < kdim; ++k) acc += ap[k * mr + i] * panel[k * nr + j];
                c[(i0 + i) * ldc + j0 + j] = acc;
              }
          }
        }
      }
    }
  }
}

}  // namespace

// Forward as weights times the unfolded image. Each output element starts
// from its bias and accumulates taps in (ci, kh, kw) order like the
// reference; padded taps add an exact zero.
void conv2d_forward(const ConvGeometry& g, std::span<const Real> x, std::span<const Real> w,
                    std::span<const Real> bias, std::span<Real> y) {
  const int64_t plane = g.out_h() * g.out_w(), rows = taps(g);
  std::vector<Real> col(static_cast<size_t>(rows * plane));
  for (int64_t n = 0; n < g.batch; ++n) {
    im2col(g, x.data() + n * g.in_channels * g.in_h * g.in_w, col.data());
    Real* yn = y.data() + n * g.out_channels * plane;
    for (int64_t co = 0; co < g.out_channels; ++co)
      std::fill(yn + co * plane, yn + (co + 1) * plane, bias.empty() ? Real(0) : bias[co]);
    gemm_acc(g.out_channels, plane, rows, w.data(), rows, 1, col.data(), plane, yn, plane);
  }
}

// Input gradient: transposed weights times the output gradient gives the
// unfolded input gradient, which is folded back onto the image tap by tap.
void conv2d_backward_input(const ConvGeometry& g, std::span<const Real> w,
                           std::span<const Real> dy, std::span<Real> dx) {
  const int64_t plane = g.out_h() * g.out_w(), rows = taps(g);
  std::vector<Real> col(static_cast<size_t>(rows * plane));
  for (int64_t n = 0; n < g.batch; ++n) {
    std::fill(col.begin(), col.end(), Real(0));
    gemm_acc(rows, plane, g.out_channels, w.data(), 1, rows, dy.data() + n * g.out_channels * plane, plane,
             col.data(), plane);
    col2im_add(g, col.data(), dx.data() + n * g.in_channels * g.in_h * g.in_w);
  }
}

// Weight gradient, computed transposed: the unfolded image times the
// transposed output gradient, accumulated image by image.
void conv2d_backward_weight(const ConvGeometry& g, std::span<const Real> x,
                            std::span<const Real> dy, std::span<Real> dw) {
  const int64_t plane = g.out_h() * g.out_w(), rows = taps(g), co_n = g.out_channels;
  std::vector<Real> col(static_cast<size_t>(rows * plane));
  std::vector<Real> dyt(static_cast<size_t>(plane * co_n)), dwt(static_cast<size_t>(rows * co_n));
  for (int64_t co = 0; co < co_n; ++co)
    for (int64_t r = 0; r < rows; ++r) dwt[static_cast<size_t>(r * co_n + co)] = dw[static_cast<size_t>(co * rows + r)];
  for (int64_t n = 0; n < g.batch; ++n) {
    im2col(g, x.data() + n * g.in_channels * g.in_h * g.in_w, col.data());
    const Real* dyn = dy.data() + n * co_n * plane;
    for (int64_t co = 0; co < co_n; ++co)
      for (int64_t p = 0; p < plane; ++p) dyt[static_cast<size_t>(p * co_n + co)] = dyn[co * plane + p];
    gemm_acc(rows, co_n, plane, col.data(), plane, 1, dyt.data(), co_n, dwt.data(), co_n);
  }
  for (int64_t co = 0; co < co_n; ++co)
    for (int64_t r = 0; r < rows; ++r) dw[static_cast<size_t>(co * rows + r)] = dwt[static_cast<size_t>(r * co_n + co)];
}

}  // namespace parallel

int64_t mac_counter() { return g_macs; }
void reset_mac_counter() { g_macs = 0; }
void add_macs(int64_t n) { g_macs += n; }

int configure_threads_from_env() {
  if (const char* env = std::getenv("RFP_NUM_THREADS")) {
    int n = std::atoi(env);
    if (n > 0) omp_set_num_threads(n);
  }
  return omp_get_max_threads();
}

}  // namespace rfp::kernels
