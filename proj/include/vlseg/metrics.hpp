#pragma once

// Evaluation metrics: IoU and its dataset aggregations (cIoU, gIoU), panoptic
// quality with the semantic-projection mIoU, region similarity J and boundary
// accuracy F for video objects, and video-instance mAP over spatio-temporal
// IoU thresholds. Every metric here has a brute-force oracle in the tests.

#include "vlseg/data.hpp"

#include <algorithm>
#include <cmath>
#include <map>
#include <stdexcept>
#include <vector>

namespace vlseg::metrics {

// Both masks empty counts as a correct no-target prediction (IoU 1); exactly
// one empty is a miss (IoU 0).
inline double iou(const BinMask& pred, const BinMask& gt) {
  if (pred.h != gt.h || pred.w != gt.w)
    throw std::invalid_argument("iou: mask shape mismatch");
  std::int64_t uni = mask_union(pred, gt);
  if (uni == 0) return 1.0;
  return static_cast<double>(mask_intersection(pred, gt)) / static_cast<double>(uni);
}

inline double ciou(const std::vector<BinMask>& preds, const std::vector<BinMask>& gts) {
  if (preds.size() != gts.size()) throw std::invalid_argument("ciou: list length mismatch");
  if (preds.empty()) throw std::invalid_argument("ciou: empty dataset");
  std::int64_t inter = 0, uni = 0;
  for (size_t i = 0; i < preds.size(); ++i) {
    inter += mask_intersection(preds[i], gts[i]);
    uni += mask_union(preds[i], gts[i]);
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

inline double giou(const std::vector<BinMask>& preds, const std::vector<BinMask>& gts) {
  if (preds.size() != gts.size()) throw std::invalid_argument("giou: list length mismatch");
  if (preds.empty()) throw std::invalid_argument("giou: empty dataset");
  double s = 0;
  for (size_t i = 0; i < preds.size(); ++i) s += iou(preds[i], gts[i]);
  return s / static_cast<double>(preds.size());
}

// ---------------------------------------------------------------------------
// Panoptic quality

struct LabeledSegment {
  BinMask mask;
  int class_id = 0;
};

struct PanopticResult {
  double pq = 1.0, sq = 1.0, rq = 1.0, miou = 1.0;
  int tp = 0, fp = 0, fn = 0;
  double iou_sum = 0.0;
  std::map<int, double> per_class_pq;
};

// Accumulates matches across images; PQ/SQ/RQ follow the pooled formula
// sum(IoU) / (TP + FP/2 + FN/2). mIoU comes from the per-class semantic
// projection of the segments.
class PanopticAccumulator {
 public:
  void add(const std::vector<LabeledSegment>& preds, const std::vector<LabeledSegment>& gts) {
    check_disjoint(preds, "predicted");
    check_disjoint(gts, "ground-truth");
    std::vector<bool> pred_used(preds.size(), false);
    for (const auto& gt : gts) {
      int match = -1;
      for (size_t p = 0; p < preds.size(); ++p) {
        if (preds[p].class_id != gt.class_id) continue;
        double v = iou_nonempty(preds[p].mask, gt.mask);
        if (v > 0.5) {
          if (match >= 0)
            throw std::logic_error("panoptic match not unique despite disjoint segments");
          match = static_cast<int>(p);
        }
      }
      auto& s = stats_[gt.class_id];
      if (match >= 0) {
        if (pred_used[static_cast<size_t>(match)])
          throw std::logic_error("panoptic match not unique despite disjoint segments");
        pred_used[static_cast<size_t>(match)] = true;
        s.tp += 1;
        s.iou_sum += iou_nonempty(preds[static_cast<size_t>(match)].mask, gt.mask);
      } else {
        s.fn += 1;
      }
    }
    for (size_t p = 0; p < preds.size(); ++p)
      if (!pred_used[p]) stats_[preds[p].class_id].fp += 1;

    // Semantic projection for mIoU.
    std::map<int, std::pair<BinMask, BinMask>> semantic;  // class -> (pred, gt)
    auto blend = [&](const std::vector<LabeledSegment>& segs, bool is_pred) {
      for (const auto& s : segs) {
        auto it = semantic.find(s.class_id);
        if (it == semantic.end())
          it = semantic.emplace(s.class_id, std::make_pair(BinMask(s.mask.h, s.mask.w),
                                                           BinMask(s.mask.h, s.mask.w)))
                   .first;
        BinMask& target = is_pred ? it->second.first : it->second.second;
        for (size_t i = 0; i < s.mask.v.size(); ++i) target.v[i] |= s.mask.v[i];
      }
    };
    blend(preds, true);
    blend(gts, false);
    for (auto& [cls, pg] : semantic) {
      sem_inter_[cls] += mask_intersection(pg.first, pg.second);
      sem_union_[cls] += mask_union(pg.first, pg.second);
    }
  }

  PanopticResult result() const {
    PanopticResult r;
    double iou_sum = 0;
    int tp = 0, fp = 0, fn = 0;
    for (const auto& [cls, s] : stats_) {
      iou_sum += s.iou_sum;
      tp += s.tp;
      fp += s.fp;
      fn += s.fn;
      double denom = s.tp + 0.5 * s.fp + 0.5 * s.fn;
      r.per_class_pq[cls] = denom == 0 ? 1.0 : s.iou_sum / denom;
    }
    r.tp = tp;
    r.fp = fp;
    r.fn = fn;
    r.iou_sum = iou_sum;
    double denom = tp + 0.5 * fp + 0.5 * fn;
    r.pq = denom == 0 ? 1.0 : iou_sum / denom;
    r.sq = tp == 0 ? 0.0 : iou_sum / tp;
    r.rq = denom == 0 ? 1.0 : tp / denom;
    double miou = 0;
    int classes = 0;
    for (const auto& [cls, u] : sem_union_) {
      if (u == 0) continue;
      miou += static_cast<double>(sem_inter_.at(cls)) / static_cast<double>(u);
      ++classes;
    }
    r.miou = classes == 0 ? 1.0 : miou / classes;
    return r;
  }

 private:
  struct ClassStats {
    int tp = 0, fp = 0, fn = 0;
    double iou_sum = 0;
  };
  static double iou_nonempty(const BinMask& a, const BinMask& b) {
    std::int64_t u = mask_union(a, b);
    return u == 0 ? 0.0 : static_cast<double>(mask_intersection(a, b)) / static_cast<double>(u);
  }
  static void check_disjoint(const std::vector<LabeledSegment>& segs, const char* side) {
    if (segs.empty()) return;
    BinMask seen(segs[0].mask.h, segs[0].mask.w);
    for (const auto& s : segs)
      for (size_t i = 0; i < s.mask.v.size(); ++i) {
        if (s.mask.v[i] && seen.v[i])
          throw std::invalid_argument(std::string("panoptic_quality: overlapping ") + side +
                                      " segments");
        seen.v[i] |= s.mask.v[i];
      }
  }
  std::map<int, ClassStats> stats_;
  std::map<int, std::int64_t> sem_inter_, sem_union_;
};

inline PanopticResult panoptic_quality(const std::vector<LabeledSegment>& preds,
                                       const std::vector<LabeledSegment>& gts) {
  PanopticAccumulator acc;
  acc.add(preds, gts);
  return acc.result();
}

// ---------------------------------------------------------------------------
// Region similarity J and boundary accuracy F

// 4-connected erosion difference: mask pixels with an out-of-mask neighbor
// (the image border counts as outside).
inline BinMask boundary_of(const BinMask& m) {
  BinMask b(m.h, m.w);
  for (int y = 0; y < m.h; ++y)
    for (int x = 0; x < m.w; ++x) {
      if (!m.at(y, x)) continue;
      bool edge = y == 0 || y == m.h - 1 || x == 0 || x == m.w - 1 || !m.at(y - 1, x) ||
                  !m.at(y + 1, x) || !m.at(y, x - 1) || !m.at(y, x + 1);
      if (edge) b.at(y, x) = 1;
    }
  return b;
}

inline int boundary_tolerance(int h, int w) {
  return std::max(1, static_cast<int>(std::lround(0.01 * std::hypot(h, w))));
}

// Boundary F-measure with disc dilation at the tolerance radius.
inline double boundary_f_measure(const BinMask& pred, const BinMask& gt) {
  if (pred.h != gt.h || pred.w != gt.w)
    throw std::invalid_argument("boundary_f_measure: shape mismatch");
  BinMask pb = boundary_of(pred), gb = boundary_of(gt);
  std::int64_t np = pb.area(), ng = gb.area();
  if (np == 0 && ng == 0) return 1.0;
  if (np == 0 || ng == 0) return 0.0;
  int tol = boundary_tolerance(pred.h, pred.w);
  std::vector<std::pair<int, int>> disc;
  for (int dy = -tol; dy <= tol; ++dy)
    for (int dx = -tol; dx <= tol; ++dx)
      if (dy * dy + dx * dx <= tol * tol) disc.push_back({dy, dx});
  auto dilate = [&](const BinMask& b) {
    BinMask d(b.h, b.w);
    for (int y = 0; y < b.h; ++y)
      for (int x = 0; x < b.w; ++x) {
        if (!b.at(y, x)) continue;
        for (auto [dy, dx] : disc) {
          int yy = y + dy, xx = x + dx;
          if (yy >= 0 && yy < b.h && xx >= 0 && xx < b.w) d.at(yy, xx) = 1;
        }
      }
    return d;
  };
  BinMask gb_d = dilate(gb), pb_d = dilate(pb);
  std::int64_t p_hit = 0, g_hit = 0;
  for (size_t i = 0; i < pb.v.size(); ++i) {
    p_hit += pb.v[i] & gb_d.v[i];
    g_hit += gb.v[i] & pb_d.v[i];
  }
  double precision = static_cast<double>(p_hit) / static_cast<double>(np);
  double recall = static_cast<double>(g_hit) / static_cast<double>(ng);
  if (precision + recall == 0) return 0.0;
  return 2 * precision * recall / (precision + recall);
}

struct JandF {
  double j = 0, f = 0, jf = 0;
};

// Per-object video scores: J = mean per-frame IoU, F = mean per-frame
// boundary F, J&F their mean.
inline JandF j_and_f(const std::vector<BinMask>& pred_frames,
                     const std::vector<BinMask>& gt_frames) {
  if (pred_frames.size() != gt_frames.size())
    throw std::invalid_argument("j_and_f: frame count mismatch");
  if (pred_frames.empty()) throw std::invalid_argument("j_and_f: empty video");
  JandF out;
  for (size_t t = 0; t < pred_frames.size(); ++t) {
    out.j += iou(pred_frames[t], gt_frames[t]);
    out.f += boundary_f_measure(pred_frames[t], gt_frames[t]);
  }
  out.j /= static_cast<double>(pred_frames.size());
  out.f /= static_cast<double>(pred_frames.size());
  out.jf = 0.5 * (out.j + out.f);
  return out;
}

// ---------------------------------------------------------------------------
// Video-instance mAP

struct EvalTrack {
  std::vector<BinMask> masks;  // one per frame
  int class_id = 0;
  double confidence = 1.0;
};

inline double st_iou(const EvalTrack& a, const EvalTrack& b) {
  if (a.masks.size() != b.masks.size())
    throw std::invalid_argument("st_iou: frame count mismatch");
  std::int64_t inter = 0, uni = 0;
  for (size_t t = 0; t < a.masks.size(); ++t) {
    inter += mask_intersection(a.masks[t], b.masks[t]);
    uni += mask_union(a.masks[t], b.masks[t]);
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

inline std::vector<double> default_map_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back(0.5 + 0.05 * i);
  return t;
}

// 101-point interpolated AP for one (class, threshold): predictions greedily
// match the best still-unmatched gt of the same class.
inline double average_precision(std::vector<const EvalTrack*> preds,
                                const std::vector<const EvalTrack*>& gts, double thr) {
  std::stable_sort(preds.begin(), preds.end(),
                   [](const EvalTrack* a, const EvalTrack* b) {
                     return a->confidence > b->confidence;
                   });
  std::vector<bool> taken(gts.size(), false);
  std::vector<int> is_tp;
  for (const EvalTrack* p : preds) {
    double best = 0;
    int best_g = -1;
    for (size_t g = 0; g < gts.size(); ++g) {
      if (taken[g]) continue;
      double v = st_iou(*p, *gts[g]);
      if (v > best) {
        best = v;
        best_g = static_cast<int>(g);
      }
    }
    if (best_g >= 0 && best >= thr) {
      taken[static_cast<size_t>(best_g)] = true;
      is_tp.push_back(1);
    } else {
      is_tp.push_back(0);
    }
  }
  if (gts.empty()) return 0.0;
  std::vector<double> precision, recall;
  int tp = 0, fp = 0;
  for (int v : is_tp) {
    tp += v;
    fp += 1 - v;
    precision.push_back(static_cast<double>(tp) / (tp + fp));
    recall.push_back(static_cast<double>(tp) / static_cast<double>(gts.size()));
  }
  std::vector<double> suffix_max(precision.size());
  double run = 0;
  for (size_t k = precision.size(); k-- > 0;) {
    run = std::max(run, precision[k]);
    suffix_max[k] = run;
  }
  double ap = 0;
  for (int i = 0; i <= 100; ++i) {
    double r = i / 100.0;
    double best_p = 0;
    for (size_t k = 0; k < recall.size(); ++k)
      if (recall[k] >= r) {
        best_p = suffix_max[k];
        break;
      }
    ap += best_p;
  }
  return ap / 101.0;
}

// Mean over IoU thresholds and classes present in the ground truth.
inline double video_map(const std::vector<EvalTrack>& preds, const std::vector<EvalTrack>& gts,
                        const std::vector<double>& thresholds = default_map_thresholds()) {
  std::vector<int> classes;
  for (const auto& g : gts) classes.push_back(g.class_id);
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  if (classes.empty()) return 0.0;
  double total = 0;
  int cells = 0;
  for (double thr : thresholds)
    for (int cls : classes) {
      std::vector<const EvalTrack*> p, g;
      for (const auto& t : preds)
        if (t.class_id == cls) p.push_back(&t);
      for (const auto& t : gts)
        if (t.class_id == cls) g.push_back(&t);
      total += average_precision(p, g, thr);
      ++cells;
    }
  return total / cells;
}

}  // namespace vlseg::metrics
