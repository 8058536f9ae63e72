// SPDX-License-Identifier: Apache-2.0
#include <omp.h>

#include <random>

#include "doctest.h"
#include "rfp/kernels.hpp"
#include "rfp/ops.hpp"
#include "test_util.hpp"

using namespace rfp;
using namespace rfp::kernels;

namespace {

struct Case {
  ConvGeometry g;
  std::vector<Real> x, w, b, dy;
};

Case random_case(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> u(0, 1 << 20);
  Case c;
  auto& g = c.g;
  g.batch = 1 + u(rng) % 3;
  g.in_channels = 1 + u(rng) % 9;
  g.out_channels = 1 + u(rng) % 11;
  g.kernel = 1 + u(rng) % 4;
  g.stride = 1 + u(rng) % 2;
  g.dilation = 1 + u(rng) % 5;
  g.padding = u(rng) % (g.dilation * (g.kernel - 1) + 1);
  const int64_t extent = g.dilation * (g.kernel - 1) + 1;
  g.in_h = std::max<int64_t>(1, extent - 2 * g.padding) + u(rng) % 13;
  g.in_w = std::max<int64_t>(1, extent - 2 * g.padding) + u(rng) % 21;
  g.validate();
  c.x = test::random_values(static_cast<size_t>(g.batch * g.in_channels * g.in_h * g.in_w), rng);
  c.w = test::random_values(static_cast<size_t>(g.out_channels * g.in_channels * g.kernel * g.kernel), rng);
  c.b = test::random_values(static_cast<size_t>(g.out_channels), rng);
  c.dy = test::random_values(static_cast<size_t>(g.batch * g.out_channels * g.out_h() * g.out_w()), rng);
  return c;
}

}  // namespace

TEST_CASE("parallel kernels agree with the serial reference") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 300; ++trial) {
    Case c = random_case(rng);
    CAPTURE(trial);
    const size_t ny = c.dy.size();
    std::vector<Real> y_ref(ny), y_par(ny);
    reference::conv2d_forward(c.g, c.x, c.w, c.b, y_ref);
    parallel::conv2d_forward(c.g, c.x, c.w, c.b, y_par);
    CHECK(test::normwise_diff(y_ref, y_par) < 1e-13);

    std::vector<Real> dx_ref(c.x.size(), 0.5), dx_par(c.x.size(), 0.5);
    reference::conv2d_backward_input(c.g, c.w, c.dy, dx_ref);
    parallel::conv2d_backward_input(c.g, c.w, c.dy, dx_par);
    CHECK(test::normwise_diff(dx_ref, dx_par) < 1e-13);

    std::vector<Real> dw_ref(c.w.size(), -0.25), dw_par(c.w.size(), -0.25);
    reference::conv2d_backward_weight(c.g, c.x, c.dy, dw_ref);
    parallel::conv2d_backward_weight(c.g, c.x, c.dy, dw_par);
    CHECK(test::normwise_diff(dw_ref, dw_par) < 1e-13);
  }
}

TEST_CASE("parallel kernels do not depend on the thread count") {
  std::mt19937_64 rng(12);
  const int saved = omp_get_max_threads();
  for (int trial = 0; trial < 40; ++trial) {
    Case c = random_case(rng);
    std::vector<Real> y1(c.dy.size()), y3(c.dy.size()), dx1(c.x.size()), dx3(c.x.size()), dw1(c.w.size()), dw3(c.w.size());
    omp_set_num_threads(1);
    parallel::conv2d_forward(c.g, c.x, c.w, c.b, y1);
    parallel::conv2d_backward_input(c.g, c.w, c.dy, dx1);
    parallel::conv2d_backward_weight(c.g, c.x, c.dy, dw1);
    omp_set_num_threads(3);
    parallel::conv2d_forward(c.g, c.x, c.w, c.b, y3);
    parallel::conv2d_backward_input(c.g, c.w, c.dy, dx3);
    parallel::conv2d_backward_weight(c.g, c.x, c.dy, dw3);
    CHECK(test::bit_equal(y1, y3));
    CHECK(test::bit_equal(dx1, dx3));
    CHECK(test::bit_equal(dw1, dw3));
  }
  omp_set_num_threads(saved);
}

TEST_CASE("reference forward visits every tap, padded ones included") {
  std::mt19937_64 rng(13);
  for (int trial = 0; trial < 50; ++trial) {
    Case c = random_case(rng);
    std::vector<Real> y(c.dy.size());
    int64_t taps = 0;
    reference::conv2d_forward(c.g, c.x, c.w, c.b, y, &taps);
    CHECK(taps == c.g.macs());
  }
}

TEST_CASE("conv2d op adds its MACs to the thread counter") {
  std::mt19937_64 rng(14);
  reset_mac_counter();
  Tensor x = test::random_tensor(Shape{2, 3, 10, 12}, rng);
  Tensor w = test::random_tensor(Shape{5, 3, 3, 3}, rng);
  (void)conv2d(x, w, std::nullopt, {.stride = 2, .padding = 1, .dilation = 1});
  // out 5 x 6, 2 images
  CHECK(mac_counter() == 2 * 5 * 3 * 9 * 5 * 6);
  (void)conv2d(x, w, std::nullopt, {.stride = 1, .padding = 3, .dilation = 3});
  CHECK(mac_counter() == 2 * 5 * 3 * 9 * 5 * 6 + 2 * 5 * 3 * 9 * 10 * 12);
  reset_mac_counter();
  CHECK(mac_counter() == 0);
}

TEST_CASE("geometry validation") {
  ConvGeometry g;
  g.in_h = g.in_w = 4;
  g.kernel = 3;
  g.dilation = 3;
  CHECK_THROWS_AS(g.validate(), ConfigError);
  g.padding = 1;  // 4 + 2 - 7 < 0
  CHECK_THROWS_AS(g.validate(), ConfigError);
  g.padding = 2;
  CHECK_NOTHROW(g.validate());
  CHECK(g.out_h() == 2);
  g.stride = 0;
  CHECK_THROWS_AS(g.validate(), ConfigError);
}
