// SPDX-License-Identifier: Apache-2.0
#include "rfp/detector.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

namespace rfp {

void DetectorConfig::validate() const {
  if (backbone_kind != BackboneKind::stub) {
    throw ConfigError("backbone.kind=resnet50 is only available to the cost model");
  }
  backbone.validate();
  fpn.validate();
  if (rfp_enabled) {
    rfp.validate();
    if (rfp.channels != fpn.out_channels) {
      throw ConfigError("rfp channel count " + std::to_string(rfp.channels) +
                        " differs from fpn.out_channels " + std::to_string(fpn.out_channels));
    }
  }
  if (image_h < 1 || image_w < 1) throw ConfigError("data.image_size must be >= 1");
  if (head.anchor_scale <= 0) throw ConfigError("head.anchor_scale must be positive");
  if (!(0.0 <= head.neg_iou && head.neg_iou <= head.pos_iou && head.pos_iou <= 1.0)) {
    throw ConfigError("head.neg_iou <= head.pos_iou must hold within [0,1]");
  }
  effective_input_size(backbone, image_h, image_w);
}

Detector::Detector(const DetectorConfig& cfg, uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  std::mt19937_64 rng(seed);
  backbone_ = BackboneParams::create(cfg_.backbone, store_, rng);
  fpn_ = FpnParams::create(cfg_.backbone, cfg_.fpn, store_, rng);
  if (cfg_.rfp_enabled) {
    for (int l = 0; l < cfg_.fpn.levels; ++l) {
      rfp_.push_back(RfpParams::create(cfg_.rfp, store_, "rfp/p" + std::to_string(l + 2), rng,
                                          cfg_.rfp_init_gain));
    }
  }
  const int c = cfg_.fpn.out_channels;
  const Conv2dOptions same{.stride = 1, .padding = 1};
  cls_head_ = ConvLayer::create(store_, "head/cls", c, 2, 3, same, true, rng, 0.1);
  reg_head_ = ConvLayer::create(store_, "head/reg", c, 4, 3, same, true, rng, 0.1);
  anchors_ = generate_anchors(cfg_.backbone, cfg_.fpn, cfg_.image_h, cfg_.image_w,
                              cfg_.head.anchor_scale);
}

std::vector<Tensor> Detector::features(const Tensor& images, std::optional<int> probe_branch) const {
  BackboneOutput c = backbone_forward(images, cfg_.backbone, backbone_);
  std::vector<Tensor> p = build_pyramid(c.c, cfg_.fpn, fpn_);
  if (!cfg_.rfp_enabled) return p;
  return attach_rfp(p, cfg_.rfp, rfp_, probe_branch);
}

Detector::Output Detector::forward(const Tensor& images, std::optional<int> probe_branch) const {
  if (images.dim(2) != cfg_.image_h || images.dim(3) != cfg_.image_w) {
    throw ConfigError("detector built for " + std::to_string(cfg_.image_h) + "x" +
                      std::to_string(cfg_.image_w) + " images, got " + images.shape().str());
  }
  std::vector<Tensor> feats = features(images, probe_branch);
  std::vector<Tensor> cls, reg;
  for (const auto& f : feats) {
    cls.push_back(cls_head_(f));
    reg.push_back(reg_head_(f));
  }
  Output out{flatten_levels(cls, 2), flatten_levels(reg, 4)};
  if (out.cls.dim(1) != static_cast<int64_t>(anchors_.size())) {
    throw ContractError("head produced " + std::to_string(out.cls.dim(1)) + " rows for " +
                        std::to_string(anchors_.size()) + " anchors");
  }
  return out;
}

std::vector<std::vector<Detection>> Detector::detect(const Tensor& images,
                                                     std::optional<int> probe_branch) const {
  NoGradGuard no_grad;
  Output out = forward(images, probe_branch);
  const int64_t n = out.cls.dim(0), na = out.cls.dim(1);
  auto logits = out.cls.values();
  auto reg = out.reg.values();
  const HeadConfig& h = cfg_.head;
  std::vector<std::vector<Detection>> result(static_cast<size_t>(n));
  for (int64_t b = 0; b < n; ++b) {
    std::vector<std::pair<double, int64_t>> cand;
    for (int64_t a = 0; a < na; ++a) {
      const int64_t row = b * na + a;
      const double l0 = logits[row * 2], l1 = logits[row * 2 + 1];
      const double score = 1.0 / (1.0 + std::exp(l0 - l1));
      if (score >= h.score_thresh) cand.emplace_back(score, a);
    }
    const size_t top = std::min(cand.size(), static_cast<size_t>(h.pre_nms_top_k));
    std::partial_sort(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(top), cand.end(),
                      [](const auto& x, const auto& y) {
                        return x.first != y.first ? x.first > y.first : x.second < y.second;
                      });
    std::vector<Detection> dets;
    for (size_t i = 0; i < top; ++i) {
      const int64_t row = b * na + cand[i].second;
      Box box = decode(anchors_[static_cast<size_t>(cand[i].second)],
                       {reg[row * 4], reg[row * 4 + 1], reg[row * 4 + 2], reg[row * 4 + 3]});
      const double x0 = std::clamp(box.x, 0.0, static_cast<double>(cfg_.image_w));
      const double y0 = std::clamp(box.y, 0.0, static_cast<double>(cfg_.image_h));
      const double x1 = std::clamp(box.x + box.w, 0.0, static_cast<double>(cfg_.image_w));
      const double y1 = std::clamp(box.y + box.h, 0.0, static_cast<double>(cfg_.image_h));
      if (x1 - x0 <= 0 || y1 - y0 <= 0) continue;
      dets.push_back({{x0, y0, x1 - x0, y1 - y0}, cand[i].first, static_cast<int>(b)});
    }
    dets = nms(std::move(dets), h.nms_iou);
    if (static_cast<int>(dets.size()) > h.max_detections) dets.resize(static_cast<size_t>(h.max_detections));
    result[static_cast<size_t>(b)] = std::move(dets);
  }
  return result;
}

std::vector<Anchor> Detector::anchors() const { return anchors_; }

void Detector::set_rfp_config(const RfpConfig& cfg) {
  if (!cfg_.rfp_enabled) throw ConfigError("detector has no RFP blocks");
  if (cfg.branches != cfg_.rfp.branches || cfg.dilations != cfg_.rfp.dilations ||
      cfg.share_weights != cfg_.rfp.share_weights || cfg.fusion != cfg_.rfp.fusion ||
      cfg.channels != cfg_.rfp.channels || cfg.use_bias != cfg_.rfp.use_bias ||
      cfg.post_relu != cfg_.rfp.post_relu) {
    throw ConfigError("set_rfp_config may only change the inference mode");
  }
  cfg.validate();
  cfg_.rfp = cfg;
}

}  // namespace rfp
