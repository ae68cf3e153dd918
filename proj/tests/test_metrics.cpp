#include "vlseg/metrics.hpp"

#include <catch2/catch_amalgamated.hpp>

#include "vlseg/rng.hpp"

#include <cmath>

using namespace vlseg;
using namespace vlseg::metrics;

namespace {

BinMask random_mask(Rng& rng, int h, int w, double density = 0.4) {
  BinMask m(h, w);
  for (auto& v : m.v) v = rng.bernoulli(density) ? 1 : 0;
  return m;
}

// Blob-style random mask: a few random rectangles, more realistic boundaries.
BinMask random_blob(Rng& rng, int h, int w) {
  BinMask m(h, w);
  int rects = rng.uniform_int(1, 3);
  for (int r = 0; r < rects; ++r) {
    int y0 = rng.uniform_int(0, h - 1), x0 = rng.uniform_int(0, w - 1);
    int y1 = rng.uniform_int(y0, h - 1), x1 = rng.uniform_int(x0, w - 1);
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) m.at(y, x) = 1;
  }
  return m;
}

double oracle_iou(const BinMask& a, const BinMask& b) {
  std::int64_t inter = 0, uni = 0;
  for (size_t i = 0; i < a.v.size(); ++i) {
    inter += a.v[i] && b.v[i];
    uni += a.v[i] || b.v[i];
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / uni;
}

// Oracle boundary F: pairwise Euclidean distances, no dilation tricks.
double oracle_boundary_f(const BinMask& pred, const BinMask& gt) {
  auto boundary = [](const BinMask& m) {
    std::vector<std::pair<int, int>> pts;
    for (int y = 0; y < m.h; ++y)
      for (int x = 0; x < m.w; ++x) {
        if (!m.at(y, x)) continue;
        bool edge = y == 0 || y == m.h - 1 || x == 0 || x == m.w - 1 || !m.at(y - 1, x) ||
                    !m.at(y + 1, x) || !m.at(y, x - 1) || !m.at(y, x + 1);
        if (edge) pts.push_back({y, x});
      }
    return pts;
  };
  auto pb = boundary(pred), gb = boundary(gt);
  if (pb.empty() && gb.empty()) return 1.0;
  if (pb.empty() || gb.empty()) return 0.0;
  double tol = boundary_tolerance(pred.h, pred.w);
  auto hits = [&](const auto& from, const auto& to) {
    int n = 0;
    for (auto [y, x] : from) {
      bool ok = false;
      for (auto [gy, gx] : to)
        if (std::hypot(y - gy, x - gx) <= tol) {
          ok = true;
          break;
        }
      if (ok) ++n;
    }
    return n;
  };
  double precision = static_cast<double>(hits(pb, gb)) / pb.size();
  double recall = static_cast<double>(hits(gb, pb)) / gb.size();
  if (precision + recall == 0) return 0.0;
  return 2 * precision * recall / (precision + recall);
}

// Oracle PQ on one image: quadratic matcher over all same-class pairs.
struct OraclePq {
  double pq, sq, rq;
};
OraclePq oracle_pq(const std::vector<LabeledSegment>& preds,
                   const std::vector<LabeledSegment>& gts) {
  std::vector<bool> used(preds.size(), false);
  int tp = 0;
  double iou_sum = 0;
  for (const auto& g : gts) {
    for (size_t p = 0; p < preds.size(); ++p) {
      if (used[p] || preds[p].class_id != g.class_id) continue;
      double v = oracle_iou(preds[p].mask, g.mask);
      std::int64_t uni = mask_union(preds[p].mask, g.mask);
      if (uni > 0 && v > 0.5) {
        used[p] = true;
        ++tp;
        iou_sum += v;
        break;  // IoU > 0.5 match is unique for disjoint segments
      }
    }
  }
  int fp = 0;
  for (bool u : used) fp += !u;
  int fn = static_cast<int>(gts.size()) - tp;
  double denom = tp + 0.5 * fp + 0.5 * fn;
  OraclePq r{};
  r.pq = denom == 0 ? 1.0 : iou_sum / denom;
  r.sq = tp == 0 ? 0.0 : iou_sum / tp;
  r.rq = denom == 0 ? 1.0 : tp / denom;
  return r;
}

// Oracle video mAP: independent straightforward implementation.
double oracle_video_map(const std::vector<EvalTrack>& preds, const std::vector<EvalTrack>& gts) {
  std::vector<int> classes;
  for (const auto& g : gts) classes.push_back(g.class_id);
  std::sort(classes.begin(), classes.end());
  classes.erase(std::unique(classes.begin(), classes.end()), classes.end());
  if (classes.empty()) return 0.0;
  double total = 0;
  int cells = 0;
  for (int ti = 0; ti < 10; ++ti) {
    double thr = 0.5 + 0.05 * ti;
    for (int cls : classes) {
      std::vector<const EvalTrack*> p;
      std::vector<const EvalTrack*> g;
      for (const auto& t : preds)
        if (t.class_id == cls) p.push_back(&t);
      for (const auto& t : gts)
        if (t.class_id == cls) g.push_back(&t);
      std::stable_sort(p.begin(), p.end(), [](const EvalTrack* a, const EvalTrack* b) {
        return a->confidence > b->confidence;
      });
      std::vector<bool> taken(g.size(), false);
      std::vector<std::pair<double, double>> pr;  // (recall, precision) after each pred
      int tp = 0;
      for (size_t i = 0; i < p.size(); ++i) {
        int best = -1;
        double best_iou = 0;
        for (size_t j = 0; j < g.size(); ++j) {
          if (taken[j]) continue;
          double v = st_iou(*p[i], *g[j]);
          if (v > best_iou) {
            best_iou = v;
            best = static_cast<int>(j);
          }
        }
        if (best >= 0 && best_iou >= thr) {
          taken[static_cast<size_t>(best)] = true;
          ++tp;
        }
        pr.push_back({g.empty() ? 0.0 : static_cast<double>(tp) / g.size(),
                      static_cast<double>(tp) / static_cast<double>(i + 1)});
      }
      // straightforward 101-point interpolation
      double ap = 0;
      for (int r = 0; r <= 100; ++r) {
        double rec = r / 100.0;
        double best_p = 0;
        for (size_t k = 0; k < pr.size(); ++k)
          if (pr[k].first >= rec)
            for (size_t k2 = k; k2 < pr.size(); ++k2) best_p = std::max(best_p, pr[k2].second);
        ap += best_p;
      }
      total += ap / 101.0;
      ++cells;
    }
  }
  return total / cells;
}

}  // namespace

TEST_CASE("iou basics") {
  BinMask a(4, 4), b(4, 4);
  CHECK(iou(a, b) == 1.0);  // both empty: correct no-target
  a.at(0, 0) = 1;
  CHECK(iou(a, b) == 0.0);  // exactly one empty
  b.at(1, 1) = 1;
  CHECK(iou(a, b) == 0.0);  // disjoint nonempty

  // 4x4, pred = left half, gt = top half -> 4/12.
  BinMask left(4, 4), top(4, 4);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 2; ++x) left.at(y, x) = 1;
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 4; ++x) top.at(y, x) = 1;
  CHECK(iou(left, top) == Catch::Approx(4.0 / 12.0));
  CHECK(iou(top, left) == iou(left, top));  // symmetry

  BinMask c(3, 3);
  CHECK_THROWS(iou(a, c));
}

TEST_CASE("ciou and giou definitions") {
  BinMask full(4, 4), empty(4, 4);
  for (auto& v : full.v) v = 1;

  SECTION("single image: ciou == giou == iou") {
    BinMask half(4, 4);
    for (int i = 0; i < 8; ++i) half.v[static_cast<size_t>(i)] = 1;
    double v = iou(half, full);
    CHECK(ciou({half}, {full}) == Catch::Approx(v));
    CHECK(giou({half}, {full}) == Catch::Approx(v));
  }
  SECTION("two images: IoUs 1.0 and 0.0, unions 10 and 90 -> gIoU 0.5, cIoU 0.1") {
    BinMask p1(10, 10), g1(10, 10);
    for (int i = 0; i < 10; ++i) {
      p1.v[static_cast<size_t>(i)] = 1;
      g1.v[static_cast<size_t>(i)] = 1;  // IoU 1.0, union 10
    }
    BinMask p2(10, 10), g2(10, 10);
    for (int i = 0; i < 45; ++i) p2.v[static_cast<size_t>(i)] = 1;
    for (int i = 45; i < 90; ++i) g2.v[static_cast<size_t>(i)] = 1;  // disjoint, union 90
    CHECK(giou({p1, p2}, {g1, g2}) == Catch::Approx(0.5));
    CHECK(ciou({p1, p2}, {g1, g2}) == Catch::Approx(0.1));
  }
  SECTION("all-perfect dataset -> both 1.0") {
    CHECK(ciou({full, empty}, {full, empty}) == 1.0);
    CHECK(giou({full, empty}, {full, empty}) == 1.0);
  }
  CHECK_THROWS(ciou({}, {}));
}

TEST_CASE("panoptic quality hand cases") {
  SECTION("single 0.8-IoU match -> PQ 0.8, RQ 1, SQ 0.8") {
    BinMask gt(10, 10), pred(10, 10);
    for (int i = 0; i < 10; ++i) gt.v[static_cast<size_t>(i)] = 1;
    for (int i = 1; i < 10; ++i) pred.v[static_cast<size_t>(i)] = 1;
    // IoU = 9/11 ~ 0.818 with these; build exact 0.8 = 8/10: |inter|=8, |union|=10
    BinMask gt2(10, 10), pred2(10, 10);
    for (int i = 0; i < 9; ++i) gt2.v[static_cast<size_t>(i)] = 1;
    for (int i = 1; i < 10; ++i) pred2.v[static_cast<size_t>(i)] = 1;  // inter 8, union 10
    auto r = panoptic_quality({{pred2, 1}}, {{gt2, 1}});
    CHECK(r.pq == Catch::Approx(0.8).margin(1e-9));
    CHECK(r.rq == Catch::Approx(1.0));
    CHECK(r.sq == Catch::Approx(0.8).margin(1e-9));
  }
  SECTION("perfect prediction -> PQ 1") {
    BinMask m(6, 6);
    for (int i = 0; i < 12; ++i) m.v[static_cast<size_t>(i)] = 1;
    auto r = panoptic_quality({{m, 0}}, {{m, 0}});
    CHECK(r.pq == 1.0);
    CHECK(r.miou == 1.0);
  }
  SECTION("one FP and one FN, no TP -> PQ 0") {
    BinMask a(6, 6), b(6, 6);
    a.at(0, 0) = 1;
    b.at(5, 5) = 1;
    auto r = panoptic_quality({{a, 0}}, {{b, 1}});
    CHECK(r.pq == 0.0);
  }
  SECTION("overlapping segments are rejected") {
    BinMask a(6, 6), b(6, 6);
    a.at(0, 0) = 1;
    b.at(0, 0) = 1;
    CHECK_THROWS_WITH(panoptic_quality({{a, 0}, {b, 1}}, {}),
                      Catch::Matchers::ContainsSubstring("overlapping"));
  }
}

TEST_CASE("panoptic quality equals the brute-force oracle on random scenes") {
  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    int h = 12, w = 12;
    // Random disjoint segments per side: partition by random pixel owner.
    auto make_side = [&](int segs) {
      std::vector<LabeledSegment> out(static_cast<size_t>(segs));
      for (int s = 0; s < segs; ++s) {
        out[static_cast<size_t>(s)].mask = BinMask(h, w);
        out[static_cast<size_t>(s)].class_id = rng.uniform_int(0, 2);
      }
      for (int pix = 0; pix < h * w; ++pix) {
        int owner = rng.uniform_int(-1, segs - 1);
        if (owner >= 0) out[static_cast<size_t>(owner)].mask.v[static_cast<size_t>(pix)] = 1;
      }
      std::vector<LabeledSegment> nonempty;
      for (auto& s : out)
        if (!s.mask.empty()) nonempty.push_back(std::move(s));
      return nonempty;
    };
    auto preds = make_side(rng.uniform_int(0, 4));
    auto gts = make_side(rng.uniform_int(0, 4));
    auto got = panoptic_quality(preds, gts);
    auto want = oracle_pq(preds, gts);
    CHECK(got.pq == Catch::Approx(want.pq).margin(1e-9));
    CHECK(got.sq == Catch::Approx(want.sq).margin(1e-9));
    CHECK(got.rq == Catch::Approx(want.rq).margin(1e-9));
  }
}

TEST_CASE("boundary F equals the pairwise-distance oracle") {
  Rng rng(2);
  SECTION("identical masks -> J = F = 1") {
    BinMask m = random_blob(rng, 16, 16);
    auto r = j_and_f({m}, {m});
    CHECK(r.j == 1.0);
    CHECK(r.f == 1.0);
    CHECK(r.jf == 1.0);
  }
  SECTION("1-pixel dilation of a square matches the oracle") {
    BinMask sq(16, 16), dil(16, 16);
    for (int y = 5; y < 10; ++y)
      for (int x = 5; x < 10; ++x) sq.at(y, x) = 1;
    for (int y = 4; y < 11; ++y)
      for (int x = 4; x < 11; ++x) dil.at(y, x) = 1;
    CHECK(boundary_f_measure(dil, sq) == Catch::Approx(oracle_boundary_f(dil, sq)).margin(1e-9));
    CHECK(boundary_f_measure(dil, sq) > 0.9);  // within 1px tolerance
  }
  SECTION("empty pred vs nonempty gt -> J = 0, F = 0") {
    BinMask empty(16, 16);
    BinMask m = random_blob(rng, 16, 16);
    auto r = j_and_f({empty, empty}, {m, m});
    CHECK(r.j == 0.0);
    CHECK(r.f == 0.0);
  }
  SECTION("randomized oracle equivalence") {
    for (int trial = 0; trial < 60; ++trial) {
      BinMask a = random_blob(rng, 16, 16), b = random_blob(rng, 16, 16);
      CHECK(boundary_f_measure(a, b) == Catch::Approx(oracle_boundary_f(a, b)).margin(1e-9));
    }
  }
  CHECK_THROWS(j_and_f({BinMask(4, 4)}, {}));
}

TEST_CASE("video mAP basics and oracle equivalence") {
  Rng rng(3);
  auto track = [&](int cls, double conf, std::vector<BinMask> masks) {
    EvalTrack t;
    t.class_id = cls;
    t.confidence = conf;
    t.masks = std::move(masks);
    return t;
  };
  SECTION("perfect tracks -> mAP 1") {
    BinMask m = random_blob(rng, 8, 8);
    std::vector<EvalTrack> gt = {track(1, 1.0, {m, m})};
    std::vector<EvalTrack> pred = {track(1, 0.9, {m, m})};
    CHECK(video_map(pred, gt) == Catch::Approx(1.0));
  }
  SECTION("single pred at st-IoU 0.6 counts only at thresholds <= 0.6") {
    BinMask g(10, 10), p(10, 10);
    for (int i = 0; i < 30; ++i) g.v[static_cast<size_t>(i)] = 1;
    for (int i = 10; i < 40; ++i) p.v[static_cast<size_t>(i)] = 1;
    // inter 20, union 40 -> 0.5 ... build exactly 0.6: inter 30, union 50
    BinMask g2(10, 10), p2(10, 10);
    for (int i = 0; i < 40; ++i) g2.v[static_cast<size_t>(i)] = 1;
    for (int i = 10; i < 50; ++i) p2.v[static_cast<size_t>(i)] = 1;  // inter 30, union 50
    std::vector<EvalTrack> gt = {track(0, 1.0, {g2})};
    std::vector<EvalTrack> pred = {track(0, 0.8, {p2})};
    // TP at 0.5, 0.55, 0.6 -> 3 of 10 thresholds with AP 1.
    CHECK(video_map(pred, gt) == Catch::Approx(3.0 / 10.0));
  }
  SECTION("3-track toy equals the oracle") {
    for (int trial = 0; trial < 40; ++trial) {
      std::vector<EvalTrack> gt, pred;
      int frames = 2;
      for (int i = 0; i < 3; ++i) {
        std::vector<BinMask> gm, pm;
        for (int t = 0; t < frames; ++t) {
          gm.push_back(random_blob(rng, 8, 8));
          pm.push_back(random_blob(rng, 8, 8));
        }
        gt.push_back(track(rng.uniform_int(0, 1), 1.0, gm));
        pred.push_back(track(rng.uniform_int(0, 1), rng.uniform(), pm));
      }
      CHECK(video_map(pred, gt) == Catch::Approx(oracle_video_map(pred, gt)).margin(1e-9));
    }
  }
  SECTION("empty predictions -> mAP 0") {
    BinMask m = random_blob(rng, 8, 8);
    std::vector<EvalTrack> gt = {track(0, 1.0, {m})};
    CHECK(video_map({}, gt) == 0.0);
  }
}

TEST_CASE("metrics lie in [0,1] and respect consistent spatial permutation") {
  Rng rng(4);
  for (int trial = 0; trial < 200; ++trial) {
    int h = rng.uniform_int(2, 16), w = rng.uniform_int(2, 16);
    BinMask a = random_mask(rng, h, w), b = random_mask(rng, h, w);
    double v = iou(a, b);
    CHECK(v >= 0.0);
    CHECK(v <= 1.0);
    double f = boundary_f_measure(a, b);
    CHECK(f >= 0.0);
    CHECK(f <= 1.0);
    CHECK(iou(a, b) == iou(b, a));
  }
  // Consistent spatial permutation (here: 180-degree rotation of both).
  for (int trial = 0; trial < 50; ++trial) {
    BinMask a = random_mask(rng, 8, 8), b = random_mask(rng, 8, 8);
    auto rot = [](const BinMask& m) {
      BinMask r(m.h, m.w);
      for (size_t i = 0; i < m.v.size(); ++i) r.v[m.v.size() - 1 - i] = m.v[i];
      return r;
    };
    CHECK(iou(rot(a), rot(b)) == iou(a, b));
  }
}

TEST_CASE("oracle injection: ground truth as prediction scores perfectly") {
  Rng rng(5);
  // Referring-style battery.
  std::vector<BinMask> gts;
  for (int i = 0; i < 10; ++i) gts.push_back(random_blob(rng, 16, 16));
  CHECK(ciou(gts, gts) == 1.0);
  CHECK(giou(gts, gts) == 1.0);
  // Panoptic battery.
  BinMask m1(16, 16), m2(16, 16);
  for (int i = 0; i < 50; ++i) m1.v[static_cast<size_t>(i)] = 1;
  for (int i = 60; i < 110; ++i) m2.v[static_cast<size_t>(i)] = 1;
  std::vector<LabeledSegment> segs = {{m1, 0}, {m2, 2}};
  auto pr = panoptic_quality(segs, segs);
  CHECK(pr.pq == 1.0);
  CHECK(pr.miou == 1.0);
  // Video battery.
  EvalTrack t;
  t.class_id = 1;
  t.confidence = 1.0;
  t.masks = {m1, m2};
  CHECK(video_map({t}, {t}) == 1.0);
  auto jf = j_and_f(t.masks, t.masks);
  CHECK(jf.jf == 1.0);
}
