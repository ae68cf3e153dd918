#pragma once

// Training objective: autoregressive text CE, matched mask loss (BCE + DICE),
// classification CE with a down-weighted no-object column, and an InfoNCE
// contrastive loss over instance embeddings of matched proposals across
// frames. Proposals are matched to ground truth by an exact Hungarian solve
// over a cost built from the same lambda weights as the loss.

#include "vlseg/autograd.hpp"
#include "vlseg/config.hpp"
#include "vlseg/data.hpp"

#include <functional>
#include <limits>
#include <vector>

namespace vlseg::losses {

using ag::Var;

// ---------------------------------------------------------------------------
// Hungarian matching (Jonker-Volgenant style potentials, exact optimum).

struct MatchResult {
  std::vector<int> assignment;  // gt index -> proposal index
  double cost = 0.0;
};

inline MatchResult hungarian_match(const Tensor<double>& cost) {
  int n = cost.rows(), m = cost.cols();
  if (n > m)
    throw std::invalid_argument("hungarian_match: more ground truths (" + std::to_string(n) +
                                ") than proposals (" + std::to_string(m) + ")");
  for (double v : cost.data)
    if (!std::isfinite(v)) throw std::invalid_argument("hungarian_match: non-finite cost");
  MatchResult res;
  res.assignment.assign(static_cast<size_t>(n), -1);
  if (n == 0) return res;

  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(static_cast<size_t>(n) + 1), v(static_cast<size_t>(m) + 1);
  std::vector<int> p(static_cast<size_t>(m) + 1), way(static_cast<size_t>(m) + 1);
  for (int i = 1; i <= n; ++i) {
    p[0] = i;
    int j0 = 0;
    std::vector<double> minv(static_cast<size_t>(m) + 1, inf);
    std::vector<bool> used(static_cast<size_t>(m) + 1, false);
    do {
      used[static_cast<size_t>(j0)] = true;
      int i0 = p[static_cast<size_t>(j0)], j1 = -1;
      double delta = inf;
      for (int j = 1; j <= m; ++j) {
        if (used[static_cast<size_t>(j)]) continue;
        double cur = cost.at(i0 - 1, j - 1) - u[static_cast<size_t>(i0)] -
                     v[static_cast<size_t>(j)];
        if (cur < minv[static_cast<size_t>(j)]) {
          minv[static_cast<size_t>(j)] = cur;
          way[static_cast<size_t>(j)] = j0;
        }
        if (minv[static_cast<size_t>(j)] < delta) {
          delta = minv[static_cast<size_t>(j)];
          j1 = j;
        }
      }
      for (int j = 0; j <= m; ++j) {
        if (used[static_cast<size_t>(j)]) {
          u[static_cast<size_t>(p[static_cast<size_t>(j)])] += delta;
          v[static_cast<size_t>(j)] -= delta;
        } else {
          minv[static_cast<size_t>(j)] -= delta;
        }
      }
      j0 = j1;
    } while (p[static_cast<size_t>(j0)] != 0);
    do {
      int j1 = way[static_cast<size_t>(j0)];
      p[static_cast<size_t>(j0)] = p[static_cast<size_t>(j1)];
      j0 = j1;
    } while (j0);
  }
  for (int j = 1; j <= m; ++j)
    if (p[static_cast<size_t>(j)] > 0)
      res.assignment[static_cast<size_t>(p[static_cast<size_t>(j)]) - 1] = j - 1;
  for (int g = 0; g < n; ++g) res.cost += cost.at(g, res.assignment[static_cast<size_t>(g)]);
  return res;
}

// ---------------------------------------------------------------------------
// Individual loss terms

// Teacher-forced token CE: logits at positions [gen_start-1, gen_start+L-2]
// predict target ids. PAD targets are masked out.
template <typename T>
Var<T> text_ce(const Var<T>& logits, int gen_start, const std::vector<int>& target_ids,
               int pad_id) {
  int len = static_cast<int>(target_ids.size());
  if (len == 0) throw std::invalid_argument("text_ce: empty target");
  if (gen_start < 1 || gen_start - 1 + len > logits.rows())
    throw std::invalid_argument("text_ce: target span outside logits");
  Var<T> rows = ag::slice_rows(logits, gen_start - 1, len);
  std::vector<double> weights(static_cast<size_t>(len), 1.0);
  for (int i = 0; i < len; ++i)
    if (target_ids[static_cast<size_t>(i)] == pad_id) weights[static_cast<size_t>(i)] = 0.0;
  return ag::cross_entropy_rows(rows, target_ids, weights);
}

// Mask loss for one (proposal, gt) pair on full-resolution logits.
template <typename T>
Var<T> mask_loss(const Var<T>& pred_logits_row, const Tensor<T>& gt_row, double lambda_bce,
                 double lambda_dice) {
  Var<T> l = ag::scalar_mul(ag::bce_with_logits_mean(pred_logits_row, gt_row), lambda_bce);
  return ag::add(l, ag::scalar_mul(ag::soft_dice(pred_logits_row, gt_row), lambda_dice));
}

// Classification CE over K+1 columns: matched proposals supervised with the
// gt class, the rest with the no-object column at weight w_noobj.
template <typename T>
Var<T> class_ce(const Var<T>& z, const std::vector<int>& assignment,
                const std::vector<int>& gt_classes, double w_noobj) {
  int n = z.rows(), k = z.cols() - 1;
  std::vector<int> targets(static_cast<size_t>(n), k);
  std::vector<double> weights(static_cast<size_t>(n), w_noobj);
  for (size_t g = 0; g < assignment.size(); ++g) {
    if (gt_classes[g] >= k)
      throw std::invalid_argument("class_ce: class index " + std::to_string(gt_classes[g]) +
                                  " >= K = " + std::to_string(k));
    targets[static_cast<size_t>(assignment[g])] = gt_classes[g];
    weights[static_cast<size_t>(assignment[g])] = 1.0;
  }
  return ag::cross_entropy_rows(z, targets, weights);
}

// InfoNCE over matched pairs: anchors from frame a, candidates from frame b,
// positives on the diagonal, temperature tau. Embedding rows are assumed
// L2-normalized. Returns loss 0 (and sets *warned) when there are no pairs.
template <typename T>
Var<T> contrastive_instance(const Var<T>& e_a, const Var<T>& e_b,
                            const std::vector<std::pair<int, int>>& identity_pairs, double tau,
                            bool* warned = nullptr) {
  if (identity_pairs.empty()) {
    if (warned) *warned = true;
    return ag::constant(Tensor<T>::scalar(T(0)));
  }
  std::vector<int> rows_a, rows_b;
  for (const auto& [ia, ib] : identity_pairs) {
    rows_a.push_back(ia);
    rows_b.push_back(ib);
  }
  Var<T> anchors = ag::gather_rows(e_a, rows_a);
  Var<T> cands = ag::gather_rows(e_b, rows_b);
  Var<T> sims = ag::scalar_mul(ag::matmul_nt(anchors, cands), 1.0 / tau);
  std::vector<int> targets(identity_pairs.size());
  for (size_t i = 0; i < targets.size(); ++i) targets[i] = static_cast<int>(i);
  return ag::cross_entropy_rows(sims, targets,
                                std::vector<double>(identity_pairs.size(), 1.0));
}

// Symmetric variant: mean of both anchor directions.
template <typename T>
Var<T> contrastive_symmetric(const Var<T>& e_a, const Var<T>& e_b,
                             const std::vector<std::pair<int, int>>& identity_pairs, double tau,
                             bool* warned = nullptr) {
  if (identity_pairs.empty()) {
    if (warned) *warned = true;
    return ag::constant(Tensor<T>::scalar(T(0)));
  }
  std::vector<std::pair<int, int>> flipped;
  for (const auto& [ia, ib] : identity_pairs) flipped.push_back({ib, ia});
  Var<T> fwd = contrastive_instance(e_a, e_b, identity_pairs, tau);
  Var<T> bwd = contrastive_instance(e_b, e_a, flipped, tau);
  return ag::scalar_mul(ag::add(fwd, bwd), 0.5);
}

template <typename T>
struct LossParts {
  Var<T> text;  // any part may be undefined (contributes nothing)
  Var<T> mask;
  Var<T> cls;
  Var<T> ins;
};

// Eq-style weighted sum; image tasks simply leave `ins` undefined.
template <typename T>
Var<T> total_loss(const LossParts<T>& parts, const ModelConfig& cfg) {
  Var<T> total = ag::constant(Tensor<T>::scalar(T(0)));
  if (parts.text.defined()) total = ag::add(total, parts.text);
  if (parts.mask.defined()) total = ag::add(total, ag::scalar_mul(parts.mask, cfg.lambda_mask));
  if (parts.cls.defined()) total = ag::add(total, ag::scalar_mul(parts.cls, cfg.lambda_cls));
  if (parts.ins.defined()) total = ag::add(total, ag::scalar_mul(parts.ins, cfg.lambda_ins));
  return total;
}

// ---------------------------------------------------------------------------
// Matching cost from detached prediction values.
// cost(g, j) = lambda_cls * (-softmax(z_j)[class_g]) + lambda_bce * bce(j, g)
//            + lambda_dice * dice(j, g); the class term is dropped when the
//            recognition strategy provides no class scores (generation-only).
// Pairwise sums go through Eigen so the cost build stays off the hot-path
// profile: bce(j,g)*npix = base_j - <z_j, t_g>, intersection = <p_j, t_g>.

template <typename T>
Tensor<double> matching_cost(const Tensor<T>& logits, const Tensor<T>& probs,
                             const Tensor<T>& z, const Tensor<T>& gt_matrix,
                             const std::vector<int>& gt_classes, const ModelConfig& cfg,
                             bool use_class_term) {
  int n = logits.rows(), npix = logits.cols();
  int g = gt_matrix.rows();
  Tensor<double> cost({g, n});
  if (g == 0) return cost;
  if (gt_matrix.cols() != npix || probs.shape != logits.shape)
    throw std::invalid_argument("matching_cost: shape mismatch");

  std::vector<double> bce_base(static_cast<size_t>(n)), sum_p(static_cast<size_t>(n));
  for (int j = 0; j < n; ++j) {
    double base = 0, sp = 0;
    const T* zrow = logits.data.data() + static_cast<size_t>(j) * npix;
    const T* prow = probs.data.data() + static_cast<size_t>(j) * npix;
    for (int pix = 0; pix < npix; ++pix) {
      double zl = zrow[pix];
      base += std::max(zl, 0.0) + std::log1p(std::exp(-std::abs(zl)));
      sp += prow[pix];
    }
    bce_base[static_cast<size_t>(j)] = base;
    sum_p[static_cast<size_t>(j)] = sp;
  }
  Tensor<T> dot_zt({n, g}), dot_pt({n, g});
  dot_zt.mat().noalias() = logits.mat() * gt_matrix.mat().transpose();
  dot_pt.mat().noalias() = probs.mat() * gt_matrix.mat().transpose();
  std::vector<double> sum_t(static_cast<size_t>(g), 0.0);
  for (int gi = 0; gi < g; ++gi)
    for (int pix = 0; pix < npix; ++pix) sum_t[static_cast<size_t>(gi)] += gt_matrix.at(gi, pix);

  std::vector<std::vector<double>> class_probs;
  if (use_class_term) {
    for (int j = 0; j < n; ++j) {
      double mx = -1e30;
      for (int c = 0; c < z.cols(); ++c) mx = std::max<double>(mx, z.at(j, c));
      double denom = 0;
      std::vector<double> p(static_cast<size_t>(z.cols()));
      for (int c = 0; c < z.cols(); ++c) {
        p[static_cast<size_t>(c)] = std::exp(static_cast<double>(z.at(j, c)) - mx);
        denom += p[static_cast<size_t>(c)];
      }
      for (auto& v : p) v /= denom;
      class_probs.push_back(std::move(p));
    }
  }
  for (int gi = 0; gi < g; ++gi)
    for (int j = 0; j < n; ++j) {
      double bce = (bce_base[static_cast<size_t>(j)] - dot_zt.at(j, gi)) / npix;
      double dice = 1.0 - (2.0 * dot_pt.at(j, gi) + 1.0) /
                              (sum_p[static_cast<size_t>(j)] + sum_t[static_cast<size_t>(gi)] + 1.0);
      double c = cfg.lambda_bce * bce + cfg.lambda_dice * dice;
      if (use_class_term)
        c += cfg.lambda_cls * (-class_probs[static_cast<size_t>(j)][static_cast<size_t>(
                 gt_classes[static_cast<size_t>(gi)])]);
      cost.at(gi, j) = c;
    }
  return cost;
}

}  // namespace vlseg::losses
