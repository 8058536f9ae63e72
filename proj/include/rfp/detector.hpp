// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "rfp/detection.hpp"
#include "rfp/parameter.hpp"
#include "rfp/pyramid.hpp"
#include "rfp/rfp_block.hpp"

namespace rfp {

struct HeadConfig {
  double anchor_scale = 4.0;
  double pos_iou = 0.35;
  double neg_iou = 0.3;
  double loss_lambda = 1.0;
  int neg_pos_ratio = 3;
  double score_thresh = 0.05;
  double nms_iou = 0.4;
  int pre_nms_top_k = 400;
  int max_detections = 100;
};

enum class BackboneKind { stub, resnet50 };

struct DetectorConfig {
  BackboneKind backbone_kind = BackboneKind::stub;  // resnet50 is cost-model only
  BackboneSpec backbone;
  PyramidSpec fpn;
  bool rfp_enabled = true;
  RfpConfig rfp;  // rfp.channels follows fpn.out_channels
  double rfp_init_gain = 1.0;  // scales the He-normal init of RFP branch weights
  HeadConfig head;
  int image_h = 128;
  int image_w = 128;

  void validate() const;
};

/// Stub backbone + FPN + per-level RFP + a classification/regression head
/// shared across levels (3x3 convs, one anchor per cell).
class Detector {
 public:
  Detector(const DetectorConfig& cfg, uint64_t seed);

  struct Output {
    Tensor cls;  // [N, A, 2]
    Tensor reg;  // [N, A, 4]
  };

  /// `probe_branch` evaluates only that RFP branch in every level, whatever
  /// the fusion mode; used to measure single-branch behaviour in ablations.
  Output forward(const Tensor& images, std::optional<int> probe_branch = std::nullopt) const;

  /// Pyramid features after the RFP blocks (P2.. order).
  std::vector<Tensor> features(const Tensor& images,
                               std::optional<int> probe_branch = std::nullopt) const;

  /// Decoded, NMS-filtered detections per image; boxes clipped to the image.
  std::vector<std::vector<Detection>> detect(const Tensor& images,
                                             std::optional<int> probe_branch = std::nullopt) const;

  std::vector<Anchor> anchors() const;

  /// Replaces the RFP inference mode; the architecture must be unchanged.
  void set_rfp_config(const RfpConfig& cfg);

  const DetectorConfig& config() const { return cfg_; }
  ParameterStore& params() { return store_; }
  const ParameterStore& params() const { return store_; }

 private:
  DetectorConfig cfg_;
  ParameterStore store_;
  BackboneParams backbone_;
  FpnParams fpn_;
  std::vector<RfpParams> rfp_;
  ConvLayer cls_head_;
  ConvLayer reg_head_;
  std::vector<Anchor> anchors_;
};

}  // namespace rfp
