#pragma once

// Segmentation predictor: refines the N mask-token embeddings against the
// multi-scale features over R decoder rounds (cross-attention to one scale
// per round, coarsest first, with optional masked attention), then emits
//   masks  - dot products of mask embeddings with a pixel-embedding map built
//            from the finest scale, bilinearly upsampled to full resolution;
//   z      - similarity logits against the projected prompt embeddings plus a
//            learned no-object column;
//   e      - L2-normalized instance embeddings (used by video tasks).
// Inference-time selection (panoptic argmax, referring union, track linking,
// first-frame reference matching) lives here too.

#include "vlseg/encoders.hpp"
#include "vlseg/nn.hpp"

#include <memory>
#include <string>
#include <vector>

namespace vlseg {

template <typename T>
struct PredictionSet {
  Var<T> logits;  // N x (H*W)
  Var<T> masks;   // sigmoid(logits), in [0, 1]
  Var<T> z;       // N x (K+1), last column = no-object
  Var<T> e;       // N x D, rows L2-normalized
  int h = 0, w = 0;
  int num_proposals() const { return logits.rows(); }
  int num_classes() const { return z.cols() - 1; }
};

// Mask logits as query-pixel dot products; exposed separately so the dot
// product contract is testable in isolation.
template <typename T>
Var<T> mask_logits(const Var<T>& mask_embeds, const Var<T>& pixel_embeds) {
  return ag::matmul_nt(mask_embeds, pixel_embeds);
}

template <typename T>
class Predictor {
 public:
  Predictor() = default;
  Predictor(nn::ParamStore<T>& ps, const std::string& name, const ModelConfig& cfg)
      : cfg_(&cfg) {
    int d = cfg.predictor_dim;
    proj_query_ = nn::Linear<T>(ps, name + ".proj_query", cfg.embed_dim, d);
    proj_prompt_ = nn::Linear<T>(ps, name + ".proj_prompt", cfg.embed_dim, d);
    int h = cfg.image_size / 4;
    for (int j = 0; j < cfg.num_fvp_layers; ++j) {
      scale_proj_.emplace_back(ps, name + ".scale_proj" + std::to_string(j),
                               cfg.scale_channels(j), d);
      level_embed_.push_back(ps.normal(name + ".level_embed" + std::to_string(j), {1, d}, 0.02));
      scale_pos_.push_back(nn::sincos_grid<T>(h >> j, h >> j, d));
    }
    for (int r = 0; r < cfg.predictor_rounds; ++r) {
      std::string rn = name + ".round" + std::to_string(r);
      ln_cross_.emplace_back(ps, rn + ".ln_cross", d);
      cross_.emplace_back(ps, rn + ".cross", d, d, cfg.predictor_heads);
      ln_self_.emplace_back(ps, rn + ".ln_self", d);
      self_.emplace_back(ps, rn + ".self", d, d, cfg.predictor_heads);
      ln_ffn_.emplace_back(ps, rn + ".ln_ffn", d);
      ffn_.emplace_back(ps, rn + ".ffn", d, 4 * d, d);
    }
    pixel_head_ = nn::Mlp<T>(ps, name + ".pixel_head", d, d, d);
    mask_head_ = nn::Mlp<T>(ps, name + ".mask_head", d, d, d);
    embed_head_ = nn::Mlp<T>(ps, name + ".embed_head", d, d, d);
    noobj_embed_ = ps.normal(name + ".noobj_embed", {1, d}, 0.02);
    upsample_plan_ = std::make_shared<ag::BilinearPlan>(
        ag::BilinearPlan::make(h, h, cfg.image_size, cfg.image_size));
  }

  // e_p: K x D_model, e_q: N x D_model, features: J scales.
  PredictionSet<T> predict(const Var<T>& e_p, const Var<T>& e_q,
                           const MultiScaleFeatures<T>& features) const {
    const ModelConfig& cfg = *cfg_;
    if (e_q.cols() != cfg.embed_dim || e_p.cols() != cfg.embed_dim)
      throw std::invalid_argument("predict: E_P/E_Q dim mismatch with embed_dim");
    if (static_cast<int>(features.scales.size()) != cfg.num_fvp_layers)
      throw std::invalid_argument("predict: expected " + std::to_string(cfg.num_fvp_layers) +
                                  " feature scales");

    std::vector<Var<T>> keys;
    for (size_t j = 0; j < features.scales.size(); ++j) {
      Var<T> k = scale_proj_[j].forward(features.scales[j].feat);
      k = ag::add_rowvec(k, level_embed_[j]);
      k = ag::add(k, ag::constant(scale_pos_[j]));
      keys.push_back(k);
    }
    Var<T> pixel_embeds = pixel_head_.forward(keys[0]);
    int fh = features.scales[0].h, fw = features.scales[0].w;
    double dot_scale = 1.0 / std::sqrt(static_cast<double>(cfg.predictor_dim));

    Var<T> q = proj_query_.forward(e_q);
    Tensor<T> estimate =
        mask_logits(ag::scalar_mul(mask_head_.forward(q), dot_scale), pixel_embeds).val();
    int rounds = static_cast<int>(cross_.size());
    int j_count = static_cast<int>(keys.size());
    for (int r = 0; r < rounds; ++r) {
      int s = j_count - 1 - (r % j_count);  // coarsest scale first
      Tensor<T> bias;
      const Tensor<T>* bias_ptr = nullptr;
      if (cfg.masked_attention) {
        bias = attention_bias(estimate, fh, fw, features.scales[static_cast<size_t>(s)].h,
                              features.scales[static_cast<size_t>(s)].w);
        bias_ptr = &bias;
      }
      q = ag::add(q, cross_[static_cast<size_t>(r)].forward(
                         ln_cross_[static_cast<size_t>(r)].forward(q),
                         keys[static_cast<size_t>(s)], bias_ptr));
      Var<T> qs = ln_self_[static_cast<size_t>(r)].forward(q);
      q = ag::add(q, self_[static_cast<size_t>(r)].forward(qs, qs));
      q = ag::add(q, ffn_[static_cast<size_t>(r)].forward(ln_ffn_[static_cast<size_t>(r)].forward(q)));
      estimate =
          mask_logits(ag::scalar_mul(mask_head_.forward(q), dot_scale), pixel_embeds).val();
    }

    PredictionSet<T> out;
    out.h = cfg.image_size;
    out.w = cfg.image_size;
    Var<T> coarse = mask_logits(ag::scalar_mul(mask_head_.forward(q), dot_scale), pixel_embeds);
    out.logits = ag::upsample_bilinear_rows(coarse, upsample_plan_);
    out.masks = ag::sigmoid(out.logits);
    Var<T> q_scaled = ag::scalar_mul(q, dot_scale);
    Var<T> z_real = ag::matmul_nt(q_scaled, proj_prompt_.forward(e_p));
    Var<T> z_noobj = ag::matmul_nt(q_scaled, noobj_embed_);
    out.z = ag::concat_cols<T>({z_real, z_noobj});
    out.e = ag::l2_normalize_rows(embed_head_.forward(q));
    if (!out.z.val().all_finite() || !out.logits.val().all_finite())
      throw std::runtime_error("predict: non-finite outputs (NaN guard)");
    return out;
  }

 private:
  // Masked attention: block keys whose pooled mask probability is below 0.5;
  // rows with no active key attend everywhere. Detached from the graph.
  static Tensor<T> attention_bias(const Tensor<T>& estimate, int fh, int fw, int sh, int sw) {
    int n = estimate.rows();
    int fy = fh / sh, fx = fw / sw;
    Tensor<T> bias({n, sh * sw});
    for (int i = 0; i < n; ++i) {
      bool any = false;
      for (int cy = 0; cy < sh; ++cy)
        for (int cx = 0; cx < sw; ++cx) {
          double p = 0;
          for (int yy = 0; yy < fy; ++yy)
            for (int xx = 0; xx < fx; ++xx) {
              double z = estimate.at(i, (cy * fy + yy) * fw + (cx * fx + xx));
              p += z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z));
            }
          p /= fy * fx;
          bool on = p >= 0.5;
          any = any || on;
          bias.at(i, cy * sw + cx) = on ? T(0) : static_cast<T>(-1e9);
        }
      if (!any)
        for (int c = 0; c < sh * sw; ++c) bias.at(i, c) = T(0);
    }
    return bias;
  }

  const ModelConfig* cfg_ = nullptr;
  nn::Linear<T> proj_query_, proj_prompt_;
  std::vector<nn::Linear<T>> scale_proj_;
  std::vector<Var<T>> level_embed_;
  std::vector<Tensor<T>> scale_pos_;
  std::vector<nn::LayerNorm<T>> ln_cross_, ln_self_, ln_ffn_;
  std::vector<nn::MultiHeadAttention<T>> cross_, self_;
  std::vector<nn::Mlp<T>> ffn_;
  nn::Mlp<T> pixel_head_, mask_head_, embed_head_;
  Var<T> noobj_embed_;
  std::shared_ptr<ag::BilinearPlan> upsample_plan_;
};

// ---------------------------------------------------------------------------
// Inference-time selection. Operates on plain tensors (detached values).

struct SegmentOutput {
  BinMask mask;
  int class_id = 0;
  double score = 0.0;
  int proposal = -1;
};

inline std::vector<double> softmax_row(const TensorF& z, int row) {
  std::vector<double> p(static_cast<size_t>(z.cols()));
  double mx = -1e30;
  for (int j = 0; j < z.cols(); ++j) mx = std::max<double>(mx, z.at(row, j));
  double denom = 0;
  for (int j = 0; j < z.cols(); ++j) {
    p[static_cast<size_t>(j)] = std::exp(static_cast<double>(z.at(row, j)) - mx);
    denom += p[static_cast<size_t>(j)];
  }
  for (auto& v : p) v /= denom;
  return p;
}

// Values-only view of a PredictionSet (optionally with class probabilities
// overridden, e.g. by the generation-only strategy).
struct PredictionView {
  TensorF masks;   // N x (H*W) probabilities
  TensorF z;       // N x (K+1) logits
  TensorF e;       // N x D
  int h = 0, w = 0;
  std::vector<std::vector<double>> class_probs;  // per proposal, K+1 simplex

  template <typename T>
  static PredictionView from(const PredictionSet<T>& p) {
    PredictionView v;
    auto to_f = [](const Tensor<T>& t) {
      TensorF f(t.shape);
      for (std::int64_t i = 0; i < t.size(); ++i)
        f.data[static_cast<size_t>(i)] = static_cast<float>(t.data[static_cast<size_t>(i)]);
      return f;
    };
    v.masks = to_f(p.masks.val());
    v.z = to_f(p.z.val());
    v.e = to_f(p.e.val());
    v.h = p.h;
    v.w = p.w;
    for (int i = 0; i < v.z.rows(); ++i) v.class_probs.push_back(softmax_row(v.z, i));
    return v;
  }
};

inline BinMask threshold_mask(const TensorF& masks, int row, int h, int w, double thr) {
  BinMask m(h, w);
  for (int i = 0; i < h * w; ++i) m.v[static_cast<size_t>(i)] = masks.at(row, i) >= thr;
  return m;
}

// Panoptic: keep proposals whose argmax class is real, assign each pixel to
// the best kept proposal by confidence-weighted mask score; pixels whose
// winner is below the mask threshold stay void. Output segments are disjoint
// by construction.
inline std::vector<SegmentOutput> select_panoptic(const PredictionView& pred,
                                                  double mask_threshold) {
  int n = pred.masks.rows(), k = pred.z.cols() - 1;
  std::vector<int> kept;
  std::vector<int> cls(static_cast<size_t>(n));
  std::vector<double> score(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) {
    const auto& p = pred.class_probs[static_cast<size_t>(i)];
    int best = 0;
    for (int j = 1; j <= k; ++j)
      if (p[static_cast<size_t>(j)] > p[static_cast<size_t>(best)]) best = j;
    if (best == k) continue;  // no-object wins
    kept.push_back(i);
    cls[static_cast<size_t>(i)] = best;
    score[static_cast<size_t>(i)] = p[static_cast<size_t>(best)];
  }
  std::vector<SegmentOutput> segs;
  if (kept.empty()) return segs;
  std::vector<BinMask> masks(kept.size(), BinMask(pred.h, pred.w));
  for (int pix = 0; pix < pred.h * pred.w; ++pix) {
    double best_v = 0;
    int best_i = -1;
    for (size_t ki = 0; ki < kept.size(); ++ki) {
      double v = score[static_cast<size_t>(kept[ki])] * pred.masks.at(kept[ki], pix);
      if (v > best_v) {
        best_v = v;
        best_i = static_cast<int>(ki);
      }
    }
    if (best_i >= 0 && pred.masks.at(kept[static_cast<size_t>(best_i)], pix) >= mask_threshold)
      masks[static_cast<size_t>(best_i)].v[static_cast<size_t>(pix)] = 1;
  }
  for (size_t ki = 0; ki < kept.size(); ++ki) {
    if (masks[ki].empty()) continue;
    segs.push_back({std::move(masks[ki]), cls[static_cast<size_t>(kept[ki])],
                    score[static_cast<size_t>(kept[ki])], kept[ki]});
  }
  return segs;
}

// Referring/reasoning: union of proposals whose target probability clears the
// threshold. Zero targets (empty union) is a legal outcome.
inline BinMask select_referring(const PredictionView& pred, double target_threshold,
                                double mask_threshold) {
  BinMask out(pred.h, pred.w);
  for (int i = 0; i < pred.masks.rows(); ++i) {
    if (pred.class_probs[static_cast<size_t>(i)][0] <= target_threshold) continue;
    for (int pix = 0; pix < pred.h * pred.w; ++pix)
      if (pred.masks.at(i, pix) >= mask_threshold) out.v[static_cast<size_t>(pix)] = 1;
  }
  return out;
}

// Visual prompts: top-1 proposal per region condition.
inline std::vector<BinMask> select_visual(const PredictionView& pred, int regions,
                                          double mask_threshold) {
  std::vector<BinMask> out;
  for (int r = 0; r < regions; ++r) {
    int best = 0;
    for (int i = 1; i < pred.masks.rows(); ++i)
      if (pred.class_probs[static_cast<size_t>(i)][static_cast<size_t>(r)] >
          pred.class_probs[static_cast<size_t>(best)][static_cast<size_t>(r)])
        best = i;
    out.push_back(threshold_mask(pred.masks, best, pred.h, pred.w, mask_threshold));
  }
  return out;
}

inline double cosine(const TensorF& a, int ra, const TensorF& b, int rb) {
  double dot = 0;
  for (int j = 0; j < a.cols(); ++j) dot += static_cast<double>(a.at(ra, j)) * b.at(rb, j);
  return dot;  // rows are L2-normalized
}

// VOS: regions are anchored in frame 0 by class score, then followed through
// the video by cosine similarity of instance embeddings against the
// first-frame reference.
inline std::vector<std::vector<BinMask>> select_vos(const std::vector<PredictionView>& frames,
                                                    int regions, double mask_threshold) {
  std::vector<std::vector<BinMask>> per_region(static_cast<size_t>(regions));
  if (frames.empty()) return per_region;
  std::vector<int> ref_row(static_cast<size_t>(regions));
  for (int r = 0; r < regions; ++r) {
    int best = 0;
    for (int i = 1; i < frames[0].masks.rows(); ++i)
      if (frames[0].class_probs[static_cast<size_t>(i)][static_cast<size_t>(r)] >
          frames[0].class_probs[static_cast<size_t>(best)][static_cast<size_t>(r)])
        best = i;
    ref_row[static_cast<size_t>(r)] = best;
    per_region[static_cast<size_t>(r)].push_back(
        threshold_mask(frames[0].masks, best, frames[0].h, frames[0].w, mask_threshold));
  }
  for (size_t t = 1; t < frames.size(); ++t) {
    for (int r = 0; r < regions; ++r) {
      int best = 0;
      double best_sim = -2;
      for (int i = 0; i < frames[t].masks.rows(); ++i) {
        double sim = cosine(frames[t].e, i, frames[0].e, ref_row[static_cast<size_t>(r)]);
        if (sim > best_sim) {
          best_sim = sim;
          best = i;
        }
      }
      per_region[static_cast<size_t>(r)].push_back(
          threshold_mask(frames[t].masks, best, frames[t].h, frames[t].w, mask_threshold));
    }
  }
  return per_region;
}

struct Track {
  std::vector<BinMask> masks;   // one per frame (may be empty masks)
  std::vector<int> present;     // frame indices where the track was observed
  int class_id = 0;
  double confidence = 0.0;
};

// VIS: per-frame instance selection (panoptic rule), then greedy max-cosine
// linking of instance embeddings across consecutive frames.
inline std::vector<Track> link_tracks(const std::vector<PredictionView>& frames,
                                      double mask_threshold, double link_threshold) {
  struct Live {
    int track;
    int last_row;
    int last_frame;
  };
  std::vector<Track> tracks;
  std::vector<Live> live;
  int num_frames = static_cast<int>(frames.size());
  for (int t = 0; t < num_frames; ++t) {
    auto segs = select_panoptic(frames[static_cast<size_t>(t)], mask_threshold);
    // Greedy best-pair linking against live tracks.
    std::vector<bool> seg_used(segs.size(), false), live_used(live.size(), false);
    for (;;) {
      double best_sim = link_threshold;
      int bs = -1, bl = -1;
      for (size_t si = 0; si < segs.size(); ++si) {
        if (seg_used[si]) continue;
        for (size_t li = 0; li < live.size(); ++li) {
          if (live_used[li]) continue;
          double sim = cosine(frames[static_cast<size_t>(t)].e, segs[si].proposal,
                              frames[static_cast<size_t>(live[li].last_frame)].e,
                              live[li].last_row);
          if (sim > best_sim) {
            best_sim = sim;
            bs = static_cast<int>(si);
            bl = static_cast<int>(li);
          }
        }
      }
      if (bs < 0) break;
      seg_used[static_cast<size_t>(bs)] = true;
      live_used[static_cast<size_t>(bl)] = true;
      Track& tr = tracks[static_cast<size_t>(live[static_cast<size_t>(bl)].track)];
      tr.masks[static_cast<size_t>(t)] = segs[static_cast<size_t>(bs)].mask;
      tr.present.push_back(t);
      tr.confidence += segs[static_cast<size_t>(bs)].score;
      live[static_cast<size_t>(bl)].last_row = segs[static_cast<size_t>(bs)].proposal;
      live[static_cast<size_t>(bl)].last_frame = t;
    }
    for (size_t si = 0; si < segs.size(); ++si) {
      if (seg_used[si]) continue;
      Track tr;
      tr.masks.assign(static_cast<size_t>(num_frames), BinMask(frames[0].h, frames[0].w));
      tr.masks[static_cast<size_t>(t)] = segs[si].mask;
      tr.present.push_back(t);
      tr.class_id = segs[si].class_id;
      tr.confidence = segs[si].score;
      tracks.push_back(std::move(tr));
      live.push_back({static_cast<int>(tracks.size()) - 1, segs[si].proposal, t});
    }
  }
  for (auto& tr : tracks) tr.confidence /= static_cast<double>(tr.present.size());
  return tracks;
}

}  // namespace vlseg
