// SPDX-License-Identifier: Apache-2.0
//
// Brute-force restatements of anchor matching, NMS and AP, plus random
// instance generators, shared by the unit suite and the acceptance runner.
#pragma once

#include <algorithm>
#include <random>
#include <set>
#include <vector>

#include "rfp/detection.hpp"

namespace rfp::oracle {


// Coordinates on a coarse grid so exact ties in IoU and score are common.
inline Box random_box(std::mt19937_64& rng, double extent = 40.0) {
  std::uniform_int_distribution<int> pos(0, static_cast<int>(extent) / 2);
  std::uniform_int_distribution<int> size(1, 10);
  return {2.0 * pos(rng), 2.0 * pos(rng), 2.0 * size(rng), 2.0 * size(rng)};
}

inline Anchor random_anchor(std::mt19937_64& rng) {
  Box b = random_box(rng);
  return {0, b.cx(), b.cy(), b.w, b.h};
}

// Plain restatement of the assignment rule, one anchor and one gt at a time.
inline std::vector<int> oracle_match(const std::vector<Anchor>& anchors, const std::vector<Box>& gts,
                              double pos, double neg) {
  std::vector<int> label(anchors.size(), MatchResult::kNegative);
  for (size_t a = 0; a < anchors.size(); ++a) {
    double best = 0.0;
    int arg = -1;
    for (size_t g = 0; g < gts.size(); ++g) {
      double o = iou(anchors[a].box(), gts[g]);
      if (arg < 0 || o > best) {
        best = o;
        arg = static_cast<int>(g);
      }
    }
    if (arg < 0) continue;
    if (best >= pos) label[a] = arg;
    else if (best >= neg) label[a] = MatchResult::kIgnore;
  }
  std::set<size_t> taken;
  for (size_t g = 0; g < gts.size(); ++g) {
    double best = 0.0;
    size_t arg = anchors.size();
    for (size_t a = 0; a < anchors.size(); ++a) {
      if (taken.count(a)) continue;
      double o = iou(anchors[a].box(), gts[g]);
      if (o > best) {
        best = o;
        arg = a;
      }
    }
    if (arg < anchors.size()) {
      taken.insert(arg);
      label[arg] = static_cast<int>(g);
    }
  }
  return label;
}

// Repeatedly take the best remaining detection and discard everything it overlaps.
inline std::vector<Detection> oracle_nms(std::vector<Detection> pool, double thresh) {
  std::vector<Detection> kept;
  while (!pool.empty()) {
    auto it = std::min_element(pool.begin(), pool.end(), detection_before);
    Detection top = *it;
    pool.erase(it);
    kept.push_back(top);
    std::erase_if(pool, [&](const Detection& d) {
      return d.image == top.image && iou(d.box, top.box) > thresh;
    });
  }
  return kept;
}

// AP from scratch: for every distinct score threshold replay the matching on
// the prefix, then integrate the interpolated precision over recall.
inline double oracle_ap(std::vector<Detection> dets, const std::vector<GroundTruthBox>& gts, double thresh) {
  if (dets.empty() || gts.empty()) return 0.0;
  std::sort(dets.begin(), dets.end(), detection_before);
  std::vector<bool> tp(dets.size(), false);
  std::vector<bool> used(gts.size(), false);
  for (size_t i = 0; i < dets.size(); ++i) {
    int arg = -1;
    double best = -1;
    for (size_t g = 0; g < gts.size(); ++g) {
      if (used[g] || gts[g].image != dets[i].image) continue;
      double o = iou(dets[i].box, gts[g].box);
      if (o >= thresh && o > best) {
        best = o;
        arg = static_cast<int>(g);
      }
    }
    if (arg >= 0) {
      used[static_cast<size_t>(arg)] = true;
      tp[i] = true;
    }
  }
  std::set<double> scores;
  for (const auto& d : dets) scores.insert(d.score);
  std::vector<std::pair<double, double>> pr;  // (recall, precision)
  for (double s : scores) {
    int n = 0, hits = 0;
    for (size_t i = 0; i < dets.size(); ++i) {
      if (dets[i].score >= s) {
        ++n;
        hits += tp[i] ? 1 : 0;
      }
    }
    pr.emplace_back(static_cast<double>(hits) / static_cast<double>(gts.size()),
                    static_cast<double>(hits) / n);
  }
  std::set<double> recalls{0.0};
  for (auto [r, p] : pr) recalls.insert(r);
  std::vector<double> rs(recalls.begin(), recalls.end());
  double ap = 0;
  for (size_t k = 1; k < rs.size(); ++k) {
    double pmax = 0;
    for (auto [r, p] : pr) {
      if (r >= rs[k]) pmax = std::max(pmax, p);
    }
    ap += (rs[k] - rs[k - 1]) * pmax;
  }
  return ap;
}

struct ApInstance {
  std::vector<Detection> dets;
  std::vector<GroundTruthBox> gts;
};

inline ApInstance random_ap_instance(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> count(0, 20), img(0, 2), score(0, 9);
  ApInstance in;
  const int ng = count(rng), nd = count(rng);
  for (int g = 0; g < ng; ++g) in.gts.push_back({random_box(rng), img(rng)});
  for (int d = 0; d < nd; ++d) {
    Detection det{random_box(rng), 0.1 * score(rng), img(rng)};
    // perturbed copies of a gt keep true positives frequent
    if (!in.gts.empty() && score(rng) < 6) {
      const auto& g = in.gts[static_cast<size_t>(count(rng)) % in.gts.size()];
      det.box = g.box;
      det.box.x += (score(rng) % 3) - 1;
      det.image = g.image;
    }
    in.dets.push_back(det);
  }
  return in;
}

inline bool same_detections(const std::vector<Detection>& a, const std::vector<Detection>& b) {
  if (a.size() != b.size()) return false;
  for (size_t i = 0; i < a.size(); ++i) {
    if (!(a[i].box == b[i].box) || a[i].score != b[i].score || a[i].image != b[i].image) return false;
  }
  return true;
}

}  // namespace rfp::oracle
