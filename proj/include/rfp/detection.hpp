// SPDX-License-Identifier: Apache-2.0
//
// Anchors, ground-truth assignment, the two-class softmax + smooth-L1
// multi-task loss, box decoding, greedy NMS and AP at an IoU threshold.
#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include "rfp/pyramid.hpp"
#include "rfp/tensor.hpp"

namespace rfp {

/// Axis-aligned box, top-left corner plus size, in pixels.
struct Box {
  double x = 0;
  double y = 0;
  double w = 0;
  double h = 0;

  double area() const { return w * h; }
  double cx() const { return x + 0.5 * w; }
  double cy() const { return y + 0.5 * h; }
  friend bool operator==(const Box&, const Box&) = default;
};

struct Anchor {
  int level = 0;  // 0 = P2
  double cx = 0;
  double cy = 0;
  double w = 0;
  double h = 0;

  Box box() const { return {cx - 0.5 * w, cy - 0.5 * h, w, h}; }
};

struct GroundTruthBox {
  Box box;
  int image = 0;
};

struct Detection {
  Box box;
  double score = 0;
  int image = 0;
};

double iou(const Box& a, const Box& b);

/// One square anchor of side `scale * stride` per cell of every level,
/// centred on the cell; level-major, row-major within a level.
std::vector<Anchor> generate_anchors(const BackboneSpec& backbone, const PyramidSpec& spec,
                                     int64_t image_h, int64_t image_w, double scale = 4.0);

struct MatchResult {
  static constexpr int kNegative = -1;
  static constexpr int kIgnore = -2;

  std::vector<int> label;  // gt index for positives, else kNegative / kIgnore
  std::vector<std::array<double, 4>> targets;  // encoded deltas, zero for non-positives

  int positives() const;
  int negatives() const;
};

/// IoU >= pos_thresh -> positive on the best gt (lowest index on ties);
/// IoU < neg_thresh -> negative; otherwise ignore. Then every gt, in index
/// order, claims its highest-IoU anchor not already claimed by an earlier gt
/// (lowest anchor index on ties) provided that IoU is positive.
MatchResult match_anchors(std::span<const Anchor> anchors, std::span<const Box> gts,
                          double pos_thresh = 0.35, double neg_thresh = 0.3);

/// (dx / w_a, dy / h_a, log(w / w_a), log(h / h_a)) of the centre offset and size.
std::array<double, 4> encode(const Anchor& a, const Box& gt);
Box decode(const Anchor& a, const std::array<double, 4>& deltas);

double smooth_l1(double x);

struct LossConfig {
  double lambda = 1.0;
  int neg_pos_ratio = 3;
};

struct LossParts {
  Tensor total;
  double classification = 0;
  double regression = 0;
  int positives = 0;
  int sampled_negatives = 0;
};

/// cls_logits [N, A, 2] (0 = background, 1 = object), reg_preds [N, A, 4],
/// one MatchResult per image. Mean softmax cross-entropy over positives plus
/// hard negatives (ratio * max(positives, 1) per image, highest loss first),
/// plus lambda times the smooth-L1 sum per positive averaged over positives.
LossParts detection_loss(const Tensor& cls_logits, const Tensor& reg_preds,
                         std::span<const MatchResult> matches, const LossConfig& cfg = {});

/// Score-descending greedy suppression; a box is dropped when its IoU with a
/// kept box exceeds `iou_thresh`. Ties break on (x, y, w, h) ascending.
std::vector<Detection> nms(std::vector<Detection> dets, double iou_thresh);

/// Order used by NMS and AP: score desc, image, x, y, w, h asc.
bool detection_before(const Detection& a, const Detection& b);

struct PrPoint {
  double recall = 0;
  double precision = 0;
  double score = 0;  // threshold: detections with score >= this are counted
};

struct ApResult {
  double ap = 0;
  std::vector<PrPoint> curve;
  int true_positives = 0;
  int ground_truths = 0;
};

/// Detections are matched in `detection_before` order to the unclaimed
/// ground truth of the same image with the highest IoU >= iou_thresh.
/// One PR point per distinct score; AP is the area under the monotone
/// (max-to-the-right) precision envelope.
ApResult evaluate_ap(std::span<const Detection> dets, std::span<const GroundTruthBox> gts,
                     double iou_thresh = 0.5);

}  // namespace rfp
