// SPDX-License-Identifier: Apache-2.0
#include "rfp/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <random>

#include "rfp/kernels.hpp"

namespace rfp {

namespace {

uint64_t mix(uint64_t a, uint64_t b) {
  uint64_t x = a ^ (b + 0x9e3779b97f4a7c15ULL + (a << 6) + (a >> 2));
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

double unit(uint64_t bits) { return static_cast<double>(bits >> 11) * 0x1.0p-53; }

// Translates the image by (dx, dy) with mid-grey fill; boxes losing more than
// half their area to the border are dropped, the rest are clipped.
void shift_sample(Image& img, std::vector<Box>& boxes, int dx, int dy) {
  Image out = img;
  std::fill(out.pixels.begin(), out.pixels.end(), uint8_t{128});
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        const int sx = x - dx, sy = y - dy;
        if (sx < 0 || sy < 0 || sx >= img.width || sy >= img.height) continue;
        out.pixels[(static_cast<size_t>(c) * img.height + y) * img.width + x] = img.at(c, sy, sx);
      }
  std::vector<Box> kept;
  for (const Box& b : boxes) {
    const double x0 = std::max(0.0, b.x + dx), y0 = std::max(0.0, b.y + dy);
    const double x1 = std::min<double>(img.width, b.x + b.w + dx), y1 = std::min<double>(img.height, b.y + b.h + dy);
    if (x1 - x0 < 2 || y1 - y0 < 2) continue;
    const Box c{x0, y0, x1 - x0, y1 - y0};
    if (c.area() >= 0.5 * b.area()) kept.push_back(c);
  }
  img = std::move(out);
  boxes = std::move(kept);
}

ExperimentConfig with_overrides(const ExperimentConfig& base,
                                std::initializer_list<std::pair<std::string, std::string>> kv) {
  FlatConfig f = base.flat;
  for (const auto& [k, v] : kv) f.set(k, v);
  return ExperimentConfig::from_flat(f);
}

}  // namespace

Splits load_splits(const ExperimentConfig& cfg) {
  if (!cfg.data_dir.empty()) {
    const std::filesystem::path dir(cfg.data_dir);
    return {read_dataset(dir / "train"), read_dataset(dir / "test")};
  }
  return {generate_dataset(cfg.data, cfg.train_images, 0),
          generate_dataset(cfg.data, cfg.test_images, cfg.train_images)};
}

double learning_rate(const TrainConfig& t, int step) {
  double lr = t.lr;
  if (t.warmup_steps > 0 && step < t.warmup_steps) lr *= static_cast<double>(step + 1) / t.warmup_steps;
  if (step >= static_cast<int>(std::floor(t.lr_drop_at * t.steps))) lr *= 0.1;
  return lr;
}

std::vector<int> batch_indices(const TrainConfig& t, int n_images, int step) {
  if (n_images < 1) throw ConfigError("training set is empty");
  std::vector<int> out;
  std::vector<int> perm;
  int64_t cached_epoch = -1;
  for (int k = 0; k < t.batch; ++k) {
    const int64_t pos = static_cast<int64_t>(step) * t.batch + k;
    const int64_t epoch = pos / n_images;
    if (epoch != cached_epoch) {
      perm.resize(static_cast<size_t>(n_images));
      std::iota(perm.begin(), perm.end(), 0);
      std::mt19937_64 rng(mix(t.seed, static_cast<uint64_t>(epoch)));
      for (size_t i = perm.size(); i > 1; --i) {  // Fisher-Yates on raw draws
        const size_t j = static_cast<size_t>(rng() % i);
        std::swap(perm[i - 1], perm[j]);
      }
      cached_epoch = epoch;
    }
    out.push_back(perm[static_cast<size_t>(pos % n_images)]);
  }
  return out;
}

void train_steps(Detector& det, const ExperimentConfig& cfg, const Dataset& data, int from, int to,
                 const std::function<void(const StepLog&)>& on_step) {
  const TrainConfig& t = cfg.train;
  const HeadConfig& h = cfg.model.head;
  const auto anchors = det.anchors();
  const int width = cfg.model.image_w;
  for (int step = from; step < to; ++step) {
    const auto idx = batch_indices(t, static_cast<int>(data.size()), step);
    std::vector<Image> images;
    std::vector<char> flips;
    std::vector<MatchResult> matches;
    for (size_t k = 0; k < idx.size(); ++k) {
      const uint64_t r = mix(mix(t.seed, 0x5eed0000ULL + static_cast<uint64_t>(step)), k);
      Image img = data.images[static_cast<size_t>(idx[k])];
      std::vector<Box> boxes = data.boxes[static_cast<size_t>(idx[k])];
      if (t.random_crop) {
        const int dx = static_cast<int>(unit(mix(r, 1)) * 33) - 16;
        const int dy = static_cast<int>(unit(mix(r, 2)) * 33) - 16;
        shift_sample(img, boxes, dx, dy);
      }
      const bool flip = t.hflip && unit(mix(r, 3)) < 0.5;
      if (flip) {
        for (auto& b : boxes) b = hflip_box(b, width);
      }
      images.push_back(std::move(img));
      flips.push_back(flip ? 1 : 0);
      matches.push_back(match_anchors(anchors, boxes, h.pos_iou, h.neg_iou));
    }
    Tensor x = images_to_tensor(images, flips);
    auto out = det.forward(x);
    LossParts loss = detection_loss(out.cls, out.reg, matches, {h.loss_lambda, h.neg_pos_ratio});
    if (!std::isfinite(loss.total.item())) {
      throw ContractError("training diverged: loss is not finite at step " + std::to_string(step));
    }
    backward(loss.total);
    const double lr = learning_rate(t, step);
    sgd_step(det.params().all(), lr, t.momentum, t.weight_decay, t.clip_grad_norm);
    if (on_step) {
      on_step({step, lr, loss.total.item(), loss.classification, loss.regression, loss.positives,
               loss.sampled_negatives});
    }
  }
}

EvalResult evaluate(const Detector& det, const Dataset& data, std::optional<int> probe_branch, int batch) {
  EvalResult r;
  r.detections.resize(data.size());
  const int64_t before = kernels::mac_counter();
  for (size_t start = 0; start < data.size(); start += static_cast<size_t>(batch)) {
    const size_t end = std::min(data.size(), start + static_cast<size_t>(batch));
    std::span<const Image> imgs(data.images.data() + start, end - start);
    auto dets = det.detect(images_to_tensor(imgs), probe_branch);
    for (size_t i = 0; i < dets.size(); ++i) {
      for (auto& d : dets[i]) d.image = static_cast<int>(start + i);
      r.detections[start + i] = std::move(dets[i]);
    }
  }
  if (data.size() > 0) {
    r.macs_per_image = static_cast<double>(kernels::mac_counter() - before) / static_cast<double>(data.size());
  }
  std::vector<Detection> all;
  for (const auto& v : r.detections) all.insert(all.end(), v.begin(), v.end());
  r.ap = evaluate_ap(all, data.ground_truths(), 0.5);
  return r;
}

std::vector<std::string> provenance_lines(const ExperimentConfig& cfg) {
  return {"config_hash " + format_hash(cfg.config_hash()), "architecture_hash " + format_hash(cfg.architecture_hash()),
          "code_version " + code_version()};
}

std::string checkpoint_config_text(const ExperimentConfig& cfg) {
  std::string s;
  for (const auto& l : provenance_lines(cfg)) s += "# " + l + "\n";
  return s + cfg.flat.to_text();
}

Checkpoint make_checkpoint(const Detector& det, const ExperimentConfig& cfg, uint64_t step) {
  Checkpoint c;
  c.arch_hash = cfg.architecture_hash();
  c.step = step;
  c.config_text = checkpoint_config_text(cfg);
  c.entries = snapshot(det.params());
  return c;
}

ExperimentConfig config_from_checkpoint(const Checkpoint& ckpt) {
  ExperimentConfig cfg = ExperimentConfig::from_flat(FlatConfig::parse(ckpt.config_text, "checkpoint config"));
  if (cfg.architecture_hash() != ckpt.arch_hash) {
    throw ContractError("checkpoint header hash " + format_hash(ckpt.arch_hash) +
                        " disagrees with its embedded config (" + format_hash(cfg.architecture_hash()) + ")");
  }
  return cfg;
}

void check_architecture(const Checkpoint& ckpt, const ExperimentConfig& cfg) {
  if (ckpt.arch_hash != cfg.architecture_hash()) {
    throw ConfigError("architecture mismatch: checkpoint " + format_hash(ckpt.arch_hash) + ", config " +
                      format_hash(cfg.architecture_hash()));
  }
}

std::vector<FusionStudyRow> run_fusion_study(const ExperimentConfig& base, std::span<const uint64_t> seeds,
                                             const std::function<void(const std::string&)>& progress) {
  std::vector<FusionStudyRow> rows;
  auto note = [&](const std::string& s) {
    if (progress) progress(s);
  };
  for (uint64_t seed : seeds) {
    const std::string s = std::to_string(seed);
    ExperimentConfig seeded = with_overrides(base, {{"data.seed", s}, {"train.seed", s}, {"rfp.enabled", "true"},
                                                    {"rfp.inference", "all"}, {"rfp.share_weights", "true"}});
    const Splits data = load_splits(seeded);
    FusionStudyRow row;
    row.seed = seed;
    auto fit = [&](const char* branches, const char* fusion) {
      ExperimentConfig c = with_overrides(seeded, {{"rfp.branches", branches}, {"rfp.dilations", "auto"},
                                                   {"rfp.fusion", fusion}});
      auto det = std::make_unique<Detector>(c.model, c.train.seed);
      train_steps(*det, c, data.train, 0, c.train.steps);
      return det;
    };
    {
      auto det = fit("1", "branch_pool");
      row.ap_b1 = evaluate(*det, data.test).ap.ap;
      note("seed " + s + ": B=1 pool AP " + std::to_string(row.ap_b1));
    }
    {
      auto det = fit("3", "branch_pool");
      EvalResult full = evaluate(*det, data.test);
      row.ap_b3 = full.ap.ap;
      row.macs_b3 = full.macs_per_image;
      det->set_rfp_config(fold_for_inference(det->config().rfp, 2));
      EvalResult folded = evaluate(*det, data.test);
      row.ap_b3_fold2 = folded.ap.ap;
      row.macs_fold2 = folded.macs_per_image;
      note("seed " + s + ": B=3 pool AP " + std::to_string(row.ap_b3) + ", folded to branch 2 AP " +
           std::to_string(row.ap_b3_fold2));
    }
    {
      auto det = fit("3", "add");
      row.ap_add = evaluate(*det, data.test).ap.ap;
      row.ap_add_single2 = evaluate(*det, data.test, 2).ap.ap;
      note("seed " + s + ": B=3 add AP " + std::to_string(row.ap_add) + ", branch 2 only AP " +
           std::to_string(row.ap_add_single2));
    }
    rows.push_back(row);
  }
  return rows;
}

}  // namespace rfp
