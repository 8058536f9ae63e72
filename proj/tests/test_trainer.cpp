// SPDX-License-Identifier: Apache-2.0
#include <algorithm>
#include <set>

#include "doctest.h"
#include "rfp/cost_model.hpp"
#include "rfp/trainer.hpp"
#include "test_util.hpp"

using namespace rfp;

namespace {

ExperimentConfig tiny(const std::vector<std::pair<std::string, std::string>>& overrides = {}) {
  auto flat = FlatConfig::parse(
      "data.image_size = 64\n"
      "data.max_size = 40\n"
      "data.train_images = 6\n"
      "data.test_images = 4\n"
      "fpn.out_channels = 8\n"
      "backbone.stage_channels = 8,8,8,8\n"
      "backbone.stem_channels = 4\n"
      "train.batch = 2\n"
      "train.steps = 6\n"
      "train.warmup_steps = 2\n");
  for (const auto& [k, v] : overrides) flat.set(k, v);
  return ExperimentConfig::from_flat(flat);
}

std::vector<std::vector<Real>> weights(const Detector& d) {
  std::vector<std::vector<Real>> out;
  for (const auto& p : d.params().all()) out.emplace_back(p.tensor.values().begin(), p.tensor.values().end());
  return out;
}

}  // namespace

TEST_CASE("learning rate: linear warmup then a tenfold drop") {
  TrainConfig t;
  t.lr = 0.1;
  t.steps = 100;
  t.warmup_steps = 4;
  t.lr_drop_at = 0.8;
  CHECK(learning_rate(t, 0) == doctest::Approx(0.025));
  CHECK(learning_rate(t, 3) == doctest::Approx(0.1));
  CHECK(learning_rate(t, 50) == doctest::Approx(0.1));
  CHECK(learning_rate(t, 79) == doctest::Approx(0.1));
  CHECK(learning_rate(t, 80) == doctest::Approx(0.01));
  t.warmup_steps = 0;
  CHECK(learning_rate(t, 0) == doctest::Approx(0.1));
}

TEST_CASE("batches walk per-epoch permutations") {
  TrainConfig t;
  t.batch = 3;
  t.seed = 5;
  const int n = 7;
  // steps 0..6 cover exactly 3 epochs of 7 images
  std::vector<int> seen;
  for (int s = 0; s < 7; ++s) {
    auto b = batch_indices(t, n, s);
    CHECK(b.size() == 3);
    CHECK(b == batch_indices(t, n, s));
    seen.insert(seen.end(), b.begin(), b.end());
  }
  for (int e = 0; e < 3; ++e) {
    std::vector<int> epoch(seen.begin() + e * n, seen.begin() + (e + 1) * n);
    std::sort(epoch.begin(), epoch.end());
    CHECK(epoch == std::vector<int>{0, 1, 2, 3, 4, 5, 6});
  }
  TrainConfig other = t;
  other.seed = 6;
  bool differs = false;
  for (int s = 0; s < 7; ++s) differs |= batch_indices(other, n, s) != batch_indices(t, n, s);
  CHECK(differs);
  CHECK_THROWS_AS(batch_indices(t, 0, 0), ConfigError);
}

TEST_CASE("synthetic splits are disjoint slices of one stream") {
  auto cfg = tiny();
  Splits s = load_splits(cfg);
  CHECK(s.train.size() == 6);
  CHECK(s.test.size() == 4);
  std::set<std::string> names(s.train.names.begin(), s.train.names.end());
  for (const auto& n : s.test.names) CHECK(names.count(n) == 0);
  CHECK(s.test.images[0] == generate_dataset(cfg.data, 1, 6).images[0]);
}

TEST_CASE("training lowers the loss and is reproducible") {
  auto cfg = tiny({{"train.steps", "12"}, {"train.lr", "0.01"}});
  Splits s = load_splits(cfg);
  std::vector<double> losses;
  Detector a(cfg.model, cfg.train.seed);
  train_steps(a, cfg, s.train, 0, cfg.train.steps, [&](const StepLog& l) { losses.push_back(l.loss); });
  REQUIRE(losses.size() == 12);
  for (double l : losses) CHECK(std::isfinite(l));
  CHECK((losses[9] + losses[10] + losses[11]) < (losses[0] + losses[1] + losses[2]));

  Detector b(cfg.model, cfg.train.seed);
  train_steps(b, cfg, s.train, 0, cfg.train.steps);
  auto wa = weights(a), wb = weights(b);
  for (size_t i = 0; i < wa.size(); ++i) CHECK(test::bit_equal(wa[i], wb[i]));
}

TEST_CASE("divergence stops training instead of writing NaN weights") {
  auto cfg = tiny({{"train.lr", "1e6"}, {"train.warmup_steps", "0"}, {"train.steps", "20"}});
  Splits s = load_splits(cfg);
  Detector det(cfg.model, cfg.train.seed);
  CHECK_THROWS_AS(train_steps(det, cfg, s.train, 0, cfg.train.steps), ContractError);
  for (const auto& w : weights(det))
    for (Real v : w) REQUIRE(std::isfinite(v));
}

TEST_CASE("resuming from a checkpoint matches an uninterrupted run bit for bit") {
  auto cfg = tiny();
  Splits s = load_splits(cfg);
  Detector full(cfg.model, cfg.train.seed);
  train_steps(full, cfg, s.train, 0, 6);

  Detector first(cfg.model, cfg.train.seed);
  train_steps(first, cfg, s.train, 0, 3);
  Checkpoint c = make_checkpoint(first, cfg, 3);
  Detector resumed(cfg.model, 99);  // different init, overwritten by restore
  restore(resumed.params(), c);
  train_steps(resumed, cfg, s.train, 3, 6);

  auto wf = weights(full), wr = weights(resumed);
  for (size_t i = 0; i < wf.size(); ++i) CHECK(test::bit_equal(wf[i], wr[i]));
}

TEST_CASE("evaluation reports measured MACs and a valid AP") {
  auto cfg = tiny();
  Splits s = load_splits(cfg);
  Detector det(cfg.model, cfg.train.seed);
  EvalResult r = evaluate(det, s.test);
  CHECK(r.ap.ap >= 0.0);
  CHECK(r.ap.ap <= 1.0);
  CHECK(r.detections.size() == s.test.size());
  CHECK(r.macs_per_image == doctest::Approx(static_cast<double>(detector_cost(cfg.model, 64, 64).macs)));
  EvalResult probe = evaluate(det, s.test, 2);
  CHECK(probe.macs_per_image < r.macs_per_image);
  // batching does not change results
  EvalResult one = evaluate(det, s.test, std::nullopt, 1);
  CHECK(one.ap.ap == r.ap.ap);
}
