#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <optional>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "advfusion/vec3.hpp"

namespace advf {

// BEV detection box b = (x, y, h, w, alpha) with confidence score.
// h is the extent along the heading direction, w the lateral extent.
struct DetectionBox {
  double x = 0, y = 0;
  double h = 0, w = 0;
  double alpha = 0;  // radians
  double score = 1.0;
};

namespace ioudetail {

inline std::vector<Vec2> box_corners(const DetectionBox& b) {
  double c = std::cos(b.alpha), s = std::sin(b.alpha);
  double hh = 0.5 * b.h, hw = 0.5 * b.w;
  std::vector<Vec2> out;
  out.reserve(4);
  const double du[4] = {hh, hh, -hh, -hh};
  const double dv[4] = {hw, -hw, -hw, hw};
  for (int k = 0; k < 4; ++k)
    out.push_back({b.x + c * du[k] - s * dv[k], b.y + s * du[k] + c * dv[k]});
  return out;
}

inline double polygon_area(const std::vector<Vec2>& p) {
  double a = 0;
  for (size_t i = 0, n = p.size(); i < n; ++i) {
    const auto& u = p[i];
    const auto& v = p[(i + 1) % n];
    a += u.x * v.y - v.x * u.y;
  }
  return 0.5 * std::abs(a);
}

// Sutherland-Hodgman: clip polygon `poly` against convex polygon `clip`
// (counter-clockwise).
inline std::vector<Vec2> clip_convex(std::vector<Vec2> poly, const std::vector<Vec2>& clip) {
  for (size_t i = 0, n = clip.size(); i < n && !poly.empty(); ++i) {
    const Vec2& a = clip[i];
    const Vec2& b = clip[(i + 1) % n];
    auto side = [&](const Vec2& p) {
      return (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
    };
    std::vector<Vec2> out;
    for (size_t j = 0, m = poly.size(); j < m; ++j) {
      const Vec2& p = poly[j];
      const Vec2& q = poly[(j + 1) % m];
      double sp = side(p), sq = side(q);
      if (sp >= 0) out.push_back(p);
      if ((sp > 0 && sq < 0) || (sp < 0 && sq > 0)) {
        double t = sp / (sp - sq);
        out.push_back({p.x + t * (q.x - p.x), p.y + t * (q.y - p.y)});
      }
    }
    poly = std::move(out);
  }
  return poly;
}

}  // namespace ioudetail

// Exact rotated-box IoU via convex polygon clipping. Degenerate boxes have
// IoU 0 by definition.
inline double rotated_iou(const DetectionBox& a, const DetectionBox& b) {
  double area_a = a.h * a.w, area_b = b.h * b.w;
  if (area_a <= 0 || area_b <= 0) return 0.0;
  auto ca = ioudetail::box_corners(a);
  auto cb = ioudetail::box_corners(b);
  // corners as built are counter-clockwise for positive extents
  auto inter = ioudetail::clip_convex(ca, cb);
  if (inter.size() < 3) return 0.0;
  double ai = ioudetail::polygon_area(inter);
  double u = area_a + area_b - ai;
  if (u <= 0) return 0.0;
  return std::clamp(ai / u, 0.0, 1.0);
}

// Greedy score-descending suppression by rotated IoU.
inline std::vector<DetectionBox> nms(std::vector<DetectionBox> proposals, double iou_threshold) {
  std::stable_sort(proposals.begin(), proposals.end(),
                   [](const DetectionBox& a, const DetectionBox& b) { return a.score > b.score; });
  std::vector<DetectionBox> kept;
  for (const auto& p : proposals) {
    bool suppressed = false;
    for (const auto& k : kept)
      if (rotated_iou(p, k) > iou_threshold) {
        suppressed = true;
        break;
      }
    if (!suppressed) kept.push_back(p);
  }
  return kept;
}

// Per-host before/after bookkeeping for the attack-success metrics.
struct EvalRecord {
  DetectionBox host_truth;
  std::vector<DetectionBox> gt_boxes;        // all ground truth in the scene
  std::vector<DetectionBox> pre_detections;  // final detections before the attack
  std::vector<DetectionBox> post_detections; // final detections after the attack
  // flags derived from the stored detections (re-derivable)
  bool detected_before = false;
  bool detected_after = false;
  bool fp_after = false;
};

struct EvalThresholds {
  double detect_iou = 0.7;   // detected <=> some detection with IoU >= 0.7 vs host truth
  double fp_max_gt_iou = 0.3;
};

inline bool host_detected(const DetectionBox& truth, const std::vector<DetectionBox>& dets,
                          double iou_thr) {
  for (const auto& d : dets)
    if (rotated_iou(d, truth) >= iou_thr) return true;
  return false;
}

// FP <=> a post-attack detection whose max IoU with every ground-truth box is
// below 0.3 and which does not overlap any pre-attack detection.
inline bool has_false_positive(const EvalRecord& r, const EvalThresholds& thr) {
  for (const auto& d : r.post_detections) {
    double max_gt = 0;
    for (const auto& g : r.gt_boxes) max_gt = std::max(max_gt, rotated_iou(d, g));
    if (max_gt >= thr.fp_max_gt_iou) continue;
    bool overlaps_pre = false;
    for (const auto& p : r.pre_detections)
      if (rotated_iou(d, p) > 0) {
        overlaps_pre = true;
        break;
      }
    if (!overlaps_pre) return true;
  }
  return false;
}

inline void derive_flags(EvalRecord& r, const EvalThresholds& thr = {}) {
  r.detected_before = host_detected(r.host_truth, r.pre_detections, thr.detect_iou);
  r.detected_after = host_detected(r.host_truth, r.post_detections, thr.detect_iou);
  r.fp_after = has_false_positive(r, thr);
}

struct AttackSuccess {
  std::optional<double> fn_asr;  // percent; empty when no host was detected pre-attack
  double fp_asr = 0;             // percent
  double asr = 0;                // percent
};

inline AttackSuccess attack_success_rates(const std::vector<EvalRecord>& records) {
  if (records.empty()) throw std::invalid_argument("attack_success_rates: no records");
  int64_t fn_den = 0, fn_num = 0, fp_num = 0, asr_num = 0;
  for (const auto& r : records) {
    bool fn = r.detected_before && !r.detected_after;
    if (r.detected_before) {
      ++fn_den;
      if (fn) ++fn_num;
    }
    if (r.fp_after) ++fp_num;
    if (fn || r.fp_after) ++asr_num;
  }
  AttackSuccess out;
  if (fn_den > 0) out.fn_asr = 100.0 * fn_num / fn_den;
  out.fp_asr = 100.0 * fp_num / static_cast<double>(records.size());
  out.asr = 100.0 * asr_num / static_cast<double>(records.size());
  return out;
}

// recall(t) = fraction of hosts with some post-attack detection of IoU >= t.
inline std::vector<std::pair<double, double>> recall_curve(const std::vector<EvalRecord>& records,
                                                           const std::vector<double>& thresholds) {
  if (records.empty()) throw std::invalid_argument("recall_curve: no records");
  for (size_t i = 1; i < thresholds.size(); ++i)
    if (thresholds[i] < thresholds[i - 1])
      throw std::invalid_argument("recall_curve: thresholds must be sorted ascending");
  std::vector<std::pair<double, double>> out;
  for (double t : thresholds) {
    int64_t hit = 0;
    for (const auto& r : records)
      if (host_detected(r.host_truth, r.post_detections, t)) ++hit;
    out.emplace_back(t, static_cast<double>(hit) / records.size());
  }
  return out;
}

// Scored detections grouped per scene against per-scene ground truth.
struct ApSample {
  std::vector<DetectionBox> detections;
  std::vector<DetectionBox> ground_truth;
};

// 41-point interpolated AP with greedy score-ordered one-to-one matching.
inline std::optional<double> average_precision(const std::vector<ApSample>& samples,
                                               double iou_threshold) {
  int64_t n_gt = 0;
  for (const auto& s : samples) n_gt += static_cast<int64_t>(s.ground_truth.size());
  if (n_gt == 0) return std::nullopt;

  struct Scored {
    double score;
    bool tp;
  };
  std::vector<Scored> all;
  for (const auto& s : samples) {
    std::vector<size_t> order(s.detections.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) {
      return s.detections[a].score > s.detections[b].score;
    });
    std::vector<char> used(s.ground_truth.size(), 0);
    for (size_t i : order) {
      const auto& d = s.detections[i];
      double best = -1;
      int64_t best_j = -1;
      for (size_t j = 0; j < s.ground_truth.size(); ++j) {
        if (used[j]) continue;
        double iou = rotated_iou(d, s.ground_truth[j]);
        if (iou >= iou_threshold && iou > best) {
          best = iou;
          best_j = static_cast<int64_t>(j);
        }
      }
      bool tp = best_j >= 0;
      if (tp) used[best_j] = 1;
      all.push_back({d.score, tp});
    }
  }
  std::stable_sort(all.begin(), all.end(),
                   [](const Scored& a, const Scored& b) { return a.score > b.score; });
  std::vector<double> precision, recall;
  int64_t tp = 0, fp = 0;
  for (const auto& s : all) {
    (s.tp ? tp : fp)++;
    precision.push_back(static_cast<double>(tp) / (tp + fp));
    recall.push_back(static_cast<double>(tp) / n_gt);
  }
  double ap = 0;
  for (int k = 0; k <= 40; ++k) {
    double r = k / 40.0;
    double pmax = 0;
    for (size_t i = 0; i < recall.size(); ++i)
      if (recall[i] >= r) pmax = std::max(pmax, precision[i]);
    ap += pmax / 41.0;
  }
  return ap;
}

// --- report serialization -------------------------------------------------

inline nlohmann::json box_to_json(const DetectionBox& b) {
  return {{"x", b.x}, {"y", b.y}, {"h", b.h}, {"w", b.w}, {"alpha", b.alpha}, {"score", b.score}};
}

inline DetectionBox box_from_json(const nlohmann::json& j) {
  DetectionBox b;
  b.x = j.at("x");
  b.y = j.at("y");
  b.h = j.at("h");
  b.w = j.at("w");
  b.alpha = j.at("alpha");
  b.score = j.at("score");
  return b;
}

inline nlohmann::json eval_report_json(const std::vector<EvalRecord>& records,
                                       const AttackSuccess& agg,
                                       const std::vector<std::pair<double, double>>& recall,
                                       std::optional<double> ap50, std::optional<double> ap70) {
  nlohmann::json scenes = nlohmann::json::array();
  for (const auto& r : records) {
    nlohmann::json pre = nlohmann::json::array(), post = nlohmann::json::array(),
                   gt = nlohmann::json::array();
    for (const auto& b : r.pre_detections) pre.push_back(box_to_json(b));
    for (const auto& b : r.post_detections) post.push_back(box_to_json(b));
    for (const auto& b : r.gt_boxes) gt.push_back(box_to_json(b));
    scenes.push_back({{"host_truth", box_to_json(r.host_truth)},
                      {"ground_truth", gt},
                      {"pre_detections", pre},
                      {"post_detections", post},
                      {"detected_before", r.detected_before},
                      {"detected_after", r.detected_after},
                      {"fp_after", r.fp_after}});
  }
  nlohmann::json rc = nlohmann::json::array();
  for (auto [t, v] : recall) rc.push_back({{"iou", t}, {"recall", v}});
  nlohmann::json aggregate = {
      {"fn_asr", agg.fn_asr ? nlohmann::json(*agg.fn_asr) : nlohmann::json(nullptr)},
      {"fp_asr", agg.fp_asr},
      {"asr", agg.asr},
      {"ap50", ap50 ? nlohmann::json(*ap50) : nlohmann::json(nullptr)},
      {"ap70", ap70 ? nlohmann::json(*ap70) : nlohmann::json(nullptr)}};
  return {{"scenes", scenes}, {"aggregate", aggregate}, {"recall_curve", rc}};
}

inline void write_eval_csv(const std::string& path, const std::string& row_label,
                           const AttackSuccess& agg) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("write_eval_csv: cannot open " + path);
  f << "setting,fn_asr,fp_asr,asr\n";
  f << row_label << ",";
  if (agg.fn_asr) f << *agg.fn_asr;
  else f << "undefined";
  f << "," << agg.fp_asr << "," << agg.asr << "\n";
}

}  // namespace advf
