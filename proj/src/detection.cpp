// SPDX-License-Identifier: Apache-2.0
#include "rfp/detection.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <tuple>

namespace rfp {

double iou(const Box& a, const Box& b) {
  const double ix = std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x);
  const double iy = std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y);
  if (ix <= 0 || iy <= 0) return 0.0;
  const double inter = ix * iy;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

std::vector<Anchor> generate_anchors(const BackboneSpec& backbone, const PyramidSpec& spec,
                                     int64_t image_h, int64_t image_w, double scale) {
  std::vector<Anchor> anchors;
  auto sizes = pyramid_level_sizes(backbone, spec, image_h, image_w);
  for (size_t l = 0; l < sizes.size(); ++l) {
    const double stride = spec.stride(static_cast<int>(l));
    const double side = scale * stride;
    for (int64_t i = 0; i < sizes[l].first; ++i) {
      for (int64_t j = 0; j < sizes[l].second; ++j) {
        anchors.push_back({static_cast<int>(l), (static_cast<double>(j) + 0.5) * stride,
                           (static_cast<double>(i) + 0.5) * stride, side, side});
      }
    }
  }
  return anchors;
}

int MatchResult::positives() const {
  return static_cast<int>(std::count_if(label.begin(), label.end(), [](int l) { return l >= 0; }));
}

int MatchResult::negatives() const {
  return static_cast<int>(std::count(label.begin(), label.end(), kNegative));
}

MatchResult match_anchors(std::span<const Anchor> anchors, std::span<const Box> gts,
                          double pos_thresh, double neg_thresh) {
  if (anchors.empty()) throw ContractError("match_anchors: no anchors");
  if (!(0.0 <= neg_thresh && neg_thresh <= pos_thresh && pos_thresh <= 1.0)) {
    throw ContractError("match_anchors: thresholds must satisfy 0 <= neg <= pos <= 1");
  }
  const size_t na = anchors.size(), ng = gts.size();
  MatchResult m;
  m.label.assign(na, MatchResult::kNegative);
  m.targets.assign(na, {0, 0, 0, 0});
  if (ng == 0) return m;

  // Column-major IoU table; most anchors miss a given gt entirely.
  std::vector<double> table(na * ng, 0.0);
  std::vector<Box> boxes(na);
  for (size_t a = 0; a < na; ++a) boxes[a] = anchors[a].box();
  for (size_t g = 0; g < ng; ++g) {
    const Box& gt = gts[g];
    for (size_t a = 0; a < na; ++a) {
      const Box& b = boxes[a];
      if (b.x >= gt.x + gt.w || gt.x >= b.x + b.w) continue;
      table[g * na + a] = iou(b, gt);
    }
  }

  for (size_t a = 0; a < na; ++a) {
    int best = -1;
    double best_iou = -1.0;
    for (size_t g = 0; g < ng; ++g) {
      if (table[g * na + a] > best_iou) {
        best_iou = table[g * na + a];
        best = static_cast<int>(g);
      }
    }
    if (best_iou >= pos_thresh) {
      m.label[a] = best;
    } else if (best_iou >= neg_thresh) {
      m.label[a] = MatchResult::kIgnore;
    }
  }

  std::vector<char> claimed(na, 0);
  for (size_t g = 0; g < ng; ++g) {
    const double* col = table.data() + g * na;
    size_t best = na;
    for (size_t a = 0; a < na; ++a) {
      if (claimed[a]) continue;
      if (best == na || col[a] > col[best]) best = a;
    }
    if (best < na && col[best] > 0.0) {
      claimed[best] = 1;
      m.label[best] = static_cast<int>(g);
    }
  }

  for (size_t a = 0; a < na; ++a) {
    if (m.label[a] >= 0) m.targets[a] = encode(anchors[a], gts[static_cast<size_t>(m.label[a])]);
  }
  return m;
}

std::array<double, 4> encode(const Anchor& a, const Box& gt) {
  return {(gt.cx() - a.cx) / a.w, (gt.cy() - a.cy) / a.h, std::log(gt.w / a.w),
          std::log(gt.h / a.h)};
}

Box decode(const Anchor& a, const std::array<double, 4>& d) {
  constexpr double kMaxLogScale = 10.0;
  const double cx = a.cx + d[0] * a.w;
  const double cy = a.cy + d[1] * a.h;
  const double w = a.w * std::exp(std::min(d[2], kMaxLogScale));
  const double h = a.h * std::exp(std::min(d[3], kMaxLogScale));
  return {cx - 0.5 * w, cy - 0.5 * h, w, h};
}

double smooth_l1(double x) {
  const double ax = std::abs(x);
  return ax < 1.0 ? 0.5 * x * x : ax - 0.5;
}

LossParts detection_loss(const Tensor& cls_logits, const Tensor& reg_preds,
                         std::span<const MatchResult> matches, const LossConfig& cfg) {
  if (cls_logits.rank() != 3 || cls_logits.dim(2) != 2) {
    throw ConfigError("detection_loss: logits must be [N,A,2], got " + cls_logits.shape().str());
  }
  const int64_t n = cls_logits.dim(0), na = cls_logits.dim(1);
  if (reg_preds.shape() != Shape{n, na, 4}) {
    throw ConfigError("detection_loss: regression must be [N,A,4], got " + reg_preds.shape().str());
  }
  if (static_cast<int64_t>(matches.size()) != n) {
    throw ConfigError("detection_loss: one match result per image required");
  }
  for (const auto& m : matches) {
    if (static_cast<int64_t>(m.label.size()) != na) {
      throw ConfigError("detection_loss: match result covers a different anchor count");
    }
  }

  auto logits = cls_logits.values();
  auto reg = reg_preds.values();

  // sampled[(i)] holds (row, target class) pairs.
  std::vector<std::pair<int64_t, int>> sampled;
  std::vector<int64_t> positive_rows;
  std::vector<double> ce_bg(static_cast<size_t>(na));
  LossParts parts;

  for (int64_t b = 0; b < n; ++b) {
    const auto& m = matches[static_cast<size_t>(b)];
    std::vector<int64_t> negs;
    int npos = 0;
    for (int64_t a = 0; a < na; ++a) {
      const int64_t row = b * na + a;
      const double l0 = logits[row * 2], l1 = logits[row * 2 + 1];
      const double mx = std::max(l0, l1);
      const double lse = mx + std::log(std::exp(l0 - mx) + std::exp(l1 - mx));
      ce_bg[static_cast<size_t>(a)] = lse - l0;
      const int lab = m.label[static_cast<size_t>(a)];
      if (lab >= 0) {
        sampled.emplace_back(row, 1);
        positive_rows.push_back(row);
        ++npos;
      } else if (lab == MatchResult::kNegative) {
        negs.push_back(a);
      }
    }
    const size_t keep = std::min(negs.size(), static_cast<size_t>(cfg.neg_pos_ratio) *
                                                  static_cast<size_t>(std::max(npos, 1)));
    std::partial_sort(negs.begin(), negs.begin() + static_cast<std::ptrdiff_t>(keep), negs.end(),
                      [&](int64_t x, int64_t y) {
                        const double lx = ce_bg[static_cast<size_t>(x)];
                        const double ly = ce_bg[static_cast<size_t>(y)];
                        return lx != ly ? lx > ly : x < y;
                      });
    for (size_t i = 0; i < keep; ++i) sampled.emplace_back(b * na + negs[i], 0);
    parts.positives += npos;
    parts.sampled_negatives += static_cast<int>(keep);
  }

  double ce_sum = 0;
  for (auto [row, target] : sampled) {
    const double l0 = logits[row * 2], l1 = logits[row * 2 + 1];
    const double mx = std::max(l0, l1);
    const double lse = mx + std::log(std::exp(l0 - mx) + std::exp(l1 - mx));
    ce_sum += lse - (target ? l1 : l0);
  }
  const double cls = sampled.empty() ? 0.0 : ce_sum / static_cast<double>(sampled.size());

  double reg_sum = 0;
  for (int64_t row : positive_rows) {
    const auto& t = matches[static_cast<size_t>(row / na)].targets[static_cast<size_t>(row % na)];
    for (int c = 0; c < 4; ++c) reg_sum += smooth_l1(reg[row * 4 + c] - t[static_cast<size_t>(c)]);
  }
  const double regl = positive_rows.empty() ? 0.0 : reg_sum / static_cast<double>(positive_rows.size());

  parts.classification = cls;
  parts.regression = regl;
  const double total = cls + cfg.lambda * regl;

  std::vector<std::array<double, 4>> pos_targets;
  pos_targets.reserve(positive_rows.size());
  for (int64_t row : positive_rows) {
    pos_targets.push_back(matches[static_cast<size_t>(row / na)].targets[static_cast<size_t>(row % na)]);
  }
  const double lambda = cfg.lambda;
  parts.total = make_result(
      Shape{}, {static_cast<Real>(total)}, {cls_logits, reg_preds},
      [cls_logits, reg_preds, sampled, positive_rows, pos_targets, lambda](detail::Node& self) {
        const double g = self.grad[0];
        if (cls_logits.requires_grad() && !sampled.empty()) {
          auto lv = cls_logits.values();
          auto& lg = cls_logits.node()->ensure_grad();
          const double w = g / static_cast<double>(sampled.size());
          for (auto [row, target] : sampled) {
            const double l0 = lv[row * 2], l1 = lv[row * 2 + 1];
            const double mx = std::max(l0, l1);
            const double e0 = std::exp(l0 - mx), e1 = std::exp(l1 - mx);
            const double p0 = e0 / (e0 + e1), p1 = e1 / (e0 + e1);
            lg[row * 2] += static_cast<Real>(w * (p0 - (target == 0 ? 1.0 : 0.0)));
            lg[row * 2 + 1] += static_cast<Real>(w * (p1 - (target == 1 ? 1.0 : 0.0)));
          }
        }
        if (reg_preds.requires_grad()) {
          auto& rg = reg_preds.node()->ensure_grad();
          if (!positive_rows.empty()) {
            auto rv = reg_preds.values();
            const double w = g * lambda / static_cast<double>(positive_rows.size());
            for (size_t i = 0; i < positive_rows.size(); ++i) {
              const int64_t row = positive_rows[i];
              for (int c = 0; c < 4; ++c) {
                const double d = rv[row * 4 + c] - pos_targets[i][static_cast<size_t>(c)];
                rg[row * 4 + c] += static_cast<Real>(w * std::clamp(d, -1.0, 1.0));
              }
            }
          }
        }
      });
  return parts;
}

bool detection_before(const Detection& a, const Detection& b) {
  if (a.score != b.score) return a.score > b.score;
  return std::tie(a.image, a.box.x, a.box.y, a.box.w, a.box.h) <
         std::tie(b.image, b.box.x, b.box.y, b.box.w, b.box.h);
}

std::vector<Detection> nms(std::vector<Detection> dets, double iou_thresh) {
  for (const auto& d : dets) {
    if (!std::isfinite(d.score)) throw ContractError("nms: non-finite score");
  }
  std::sort(dets.begin(), dets.end(), detection_before);
  std::vector<Detection> kept;
  std::vector<char> removed(dets.size(), 0);
  for (size_t i = 0; i < dets.size(); ++i) {
    if (removed[i]) continue;
    kept.push_back(dets[i]);
    for (size_t j = i + 1; j < dets.size(); ++j) {
      if (!removed[j] && dets[j].image == dets[i].image &&
          iou(dets[i].box, dets[j].box) > iou_thresh) {
        removed[j] = 1;
      }
    }
  }
  return kept;
}

ApResult evaluate_ap(std::span<const Detection> dets, std::span<const GroundTruthBox> gts,
                     double iou_thresh) {
  ApResult r;
  r.ground_truths = static_cast<int>(gts.size());
  if (dets.empty() || gts.empty()) return r;
  for (const auto& d : dets) {
    if (!std::isfinite(d.score)) throw ContractError("evaluate_ap: non-finite score");
  }

  std::vector<Detection> sorted(dets.begin(), dets.end());
  std::sort(sorted.begin(), sorted.end(), detection_before);

  std::vector<char> claimed(gts.size(), 0);
  int tp = 0;
  for (size_t i = 0; i < sorted.size(); ++i) {
    const Detection& d = sorted[i];
    int best = -1;
    double best_iou = iou_thresh;
    for (size_t g = 0; g < gts.size(); ++g) {
      if (claimed[g] || gts[g].image != d.image) continue;
      const double o = iou(d.box, gts[g].box);
      if (o >= best_iou && (best < 0 || o > best_iou)) {
        best_iou = o;
        best = static_cast<int>(g);
      }
    }
    if (best >= 0) {
      claimed[static_cast<size_t>(best)] = 1;
      ++tp;
    }
    const bool group_end = i + 1 == sorted.size() || sorted[i + 1].score != d.score;
    if (group_end) {
      r.curve.push_back({static_cast<double>(tp) / static_cast<double>(gts.size()),
                         static_cast<double>(tp) / static_cast<double>(i + 1), d.score});
    }
  }
  r.true_positives = tp;

  double envelope = 0, ap = 0;
  for (size_t k = r.curve.size(); k-- > 0;) {
    envelope = std::max(envelope, r.curve[k].precision);
    const double prev_recall = k == 0 ? 0.0 : r.curve[k - 1].recall;
    ap += (r.curve[k].recall - prev_recall) * envelope;
  }
  r.ap = ap;
  return r;
}

}  // namespace rfp
