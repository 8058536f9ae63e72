// SPDX-License-Identifier: Apache-2.0
#include <cmath>
#include <random>

#include "doctest.h"
#include "rfp/config.hpp"
#include "rfp/cost_model.hpp"
#include "rfp/detector.hpp"
#include "rfp/errors.hpp"
#include "rfp/kernels.hpp"
#include "test_util.hpp"

using namespace rfp;

namespace {

constexpr int64_t kConv256 = 256LL * 256 * 3 * 3;

DetectorConfig published_width(int branches, bool shared = true) {
  auto flat = FlatConfig::load(RFP_SOURCE_DIR "/configs/resnet50_fpn.cfg");
  flat.set("rfp.branches", std::to_string(branches));
  flat.set("rfp.share_weights", shared ? "true" : "false");
  return ExperimentConfig::from_flat(flat).model;
}

DetectorConfig desk(int branches, Fusion fusion = Fusion::branch_pool, bool shared = true) {
  DetectorConfig cfg;
  cfg.rfp = RfpConfig::with_branches(branches, cfg.fpn.out_channels);
  cfg.rfp.fusion = fusion;
  cfg.rfp.share_weights = shared;
  return cfg;
}

int64_t measured_macs(const DetectorConfig& cfg, int64_t h, int64_t w, std::optional<int> probe = std::nullopt) {
  DetectorConfig sized = cfg;
  sized.image_h = h;
  sized.image_w = w;
  Detector det(sized, 5);
  std::mt19937_64 rng(6);
  Tensor x = test::random_tensor(Shape{1, cfg.backbone.in_channels, h, w}, rng);
  NoGradGuard ng;
  kernels::reset_mac_counter();
  (void)det.forward(x, probe);
  return kernels::mac_counter();
}

}  // namespace

TEST_CASE("one 3x3 256->256 conv without bias") {
  Graph g;
  g.input_channels = 256;
  g.layers.push_back({.name = "c", .kind = LayerKind::conv, .inputs = {"image"}, .output = "o",
                      .out_channels = 256, .kernel = 3, .padding = 1});
  auto r = count_macs(g, 10, 12);
  CHECK(r.params == 589'824);
  CHECK(r.macs == 589'824 * 120);
  CHECK(r.flops() == 2 * r.macs);
  g.layers[0].bias = true;
  CHECK(count_params(g).params == 589'824 + 256);
}

TEST_CASE("hand-counted small graph") {
  // conv s2 -> two dilated convs sharing a group -> mean -> upsample -> add
  Graph g = parse_graph(
      "input image channels=3\n"
      "conv name=stem in=image out=a cout=4 k=3 s=2 p=1 bias=true component=backbone\n"
      "conv name=b1 in=a out=b1 cout=4 k=3 p=1 d=1 group=g component=rfp\n"
      "conv name=b2 in=a out=b2 cout=4 k=3 p=2 d=2 group=g component=rfp\n"
      "mean name=m in=b1,b2 out=m component=rfp\n"
      "upsample name=u in=m out=u\n"
      "add name=s in=u,u out=s\n");
  auto r = count_macs(g, 9, 7);
  // stem output 5 x 4
  REQUIRE(r.layers.size() == 6);
  CHECK(r.layers[0].out_h == 5);
  CHECK(r.layers[0].out_w == 4);
  CHECK(r.layers[0].params == 4 * 3 * 9 + 4);
  CHECK(r.layers[0].macs == 4 * 3 * 9 * 20);
  CHECK(r.layers[1].params == 4 * 4 * 9);
  CHECK(r.layers[2].params == 0);  // second member of the group
  CHECK(r.layers[2].macs == 4 * 4 * 9 * 20);
  CHECK(r.params == 112 + 144);
  CHECK(r.params_of("rfp") == 144);
  CHECK(r.macs_of("rfp") == 2 * 4 * 4 * 9 * 20);
  CHECK(r.layers[4].out_h == 10);
  CHECK(r.layers[5].out_w == 8);
}

TEST_CASE("graph text round trip") {
  for (auto cfg : {desk(3), desk(2, Fusion::concat, false), published_width(4)}) {
    Graph g = describe_detector(cfg);
    std::string text = graph_to_text(g);
    Graph back = parse_graph(text);
    CHECK(graph_to_text(back) == text);
    CHECK(count_macs(back, 256, 256).macs == count_macs(g, 256, 256).macs);
  }
}

TEST_CASE("graph parse errors") {
  CHECK_THROWS_AS(parse_layer_kind("deconv"), ConfigError);
  CHECK_THROWS_AS(parse_graph("input image channels=3\nsoftmax name=x in=image out=y\n"), ConfigError);
  // dangling inputs are caught when the graph is evaluated
  Graph dangling = parse_graph("input image channels=3\nconv name=x in=missing out=y cout=2\n");
  CHECK_THROWS_AS(count_params(dangling), ConfigError);
  CHECK_THROWS_AS(parse_graph("input image channels=3\nconv name=x in=image out=y cout=2 k=zero\n"), ConfigError);
}

TEST_CASE("shared parameters are constant in the branch count at published width") {
  const auto p1 = detector_cost(published_width(1), 960, 1024).params;
  for (int b = 2; b <= 4; ++b) CHECK(detector_cost(published_width(b), 960, 1024).params == p1);
  CHECK(detector_cost(published_width(3), 960, 1024).params_of("rfp") == 6 * kConv256);
}

TEST_CASE("MACs grow by one fixed step per branch") {
  // level areas for 960 x 1024 at strides 4..128 (the last rounds up)
  const int64_t sigma = 240 * 256 + 120 * 128 + 60 * 64 + 30 * 32 + 15 * 16 + 8 * 8;
  CHECK(sigma == 81'904);
  const int64_t expected_step = kConv256 * sigma;
  std::vector<int64_t> macs;
  for (int b = 1; b <= 4; ++b) macs.push_back(detector_cost(published_width(b), 960, 1024).macs);
  for (int b = 1; b < 4; ++b) CHECK(macs[static_cast<size_t>(b)] - macs[static_cast<size_t>(b) - 1] == expected_step);
  const double step_g = static_cast<double>(expected_step) / 1e9;
  CHECK(step_g == doctest::Approx(48.31).epsilon(1e-3));
  // published per-branch step, GFLOPs column read as MACs
  CHECK(std::abs(step_g / 45.09 - 1.0) < 0.10);
}

TEST_CASE("unshared branches add two convolutions per level") {
  const auto shared = detector_cost(published_width(3, true), 960, 1024).params;
  const auto unshared = detector_cost(published_width(3, false), 960, 1024).params;
  CHECK(unshared - shared == 2 * 6 * kConv256);
  // published delta between unshared and shared models, millions
  const double published = 36.33 - 29.56;
  CHECK(std::abs(static_cast<double>(unshared - shared) / 1e6 / published - 1.0) < 0.06);
}

TEST_CASE("ablation tables keep their invariants") {
  auto base = desk(3);
  auto branches = ablation_table(base, AblationAxis::branches, 128, 128);
  REQUIRE(branches.size() == 5);
  CHECK(!branches[0].rfp_enabled);
  for (size_t i = 2; i < branches.size(); ++i) CHECK(branches[i].report.params == branches[1].report.params);
  auto fusion = ablation_table(base, AblationAxis::fusion, 128, 128);
  CHECK(fusion.size() >= 5);
  CHECK(!format_table_text(fusion).empty());
  CHECK(format_table_csv(fusion).find(',') != std::string::npos);
  CHECK_THROWS_AS(parse_ablation_axis("depth"), ConfigError);
}

TEST_CASE("counted MACs match the MACs a forward pass executes") {
  CHECK(detector_cost(desk(3), 128, 128).macs == measured_macs(desk(3), 128, 128));
  CHECK(detector_cost(desk(1), 64, 96).macs == measured_macs(desk(1), 64, 96));
  CHECK(detector_cost(desk(2, Fusion::concat, false), 128, 128).macs ==
        measured_macs(desk(2, Fusion::concat, false), 128, 128));
  CHECK(detector_cost(desk(3, Fusion::add), 128, 128).macs == measured_macs(desk(3, Fusion::add), 128, 128));
  CHECK(detector_cost(desk(3), 128, 128, 2).macs == measured_macs(desk(3), 128, 128, 2));
  auto no_rfp = desk(3);
  no_rfp.rfp_enabled = false;
  CHECK(detector_cost(no_rfp, 128, 128).macs == measured_macs(no_rfp, 128, 128));
}

TEST_CASE("a probed single branch costs one third of the RFP convolutions") {
  auto full = detector_cost(desk(3), 128, 128);
  auto one = detector_cost(desk(3), 128, 128, 2);
  CHECK(full.macs_of("rfp") == 3 * one.macs_of("rfp"));
  CHECK(full.params == one.params);
}
