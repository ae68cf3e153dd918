#pragma once

// The two vision towers: a low-resolution patch-transformer ("vanilla")
// encoder producing the f_v grid, and a strided-conv pyramid encoder
// producing J multi-scale feature maps. Convolutions are non-overlapping
// (kernel == stride), implemented as gather + reshape + matmul, so a constant
// image yields spatially constant features at every scale.

#include "vlseg/config.hpp"
#include "vlseg/data.hpp"
#include "vlseg/nn.hpp"

#include <string>
#include <vector>

namespace vlseg {

using ag::Var;

// A feature map stored as rows = cells (row-major over h x w), cols = channels.
template <typename T>
struct FeatureGrid {
  Var<T> feat;
  int h = 0, w = 0;
  int channels() const { return feat.cols(); }
};

template <typename T>
struct MultiScaleFeatures {
  // scales[0] is the finest (stride 4), scales[J-1] the coarsest.
  std::vector<FeatureGrid<T>> scales;
};

namespace detail {

// Row indices that regroup an h x w grid of rows into (h/s * w/s) patches of
// s*s consecutive rows each; gather + reshape then performs a kernel=stride
// convolution as one matmul.
inline std::vector<int> patchify_indices(int h, int w, int s) {
  if (h % s != 0 || w % s != 0)
    throw std::invalid_argument("patchify: grid " + std::to_string(h) + "x" +
                                std::to_string(w) + " not divisible by stride " +
                                std::to_string(s));
  std::vector<int> idx;
  idx.reserve(static_cast<size_t>(h) * w);
  for (int gy = 0; gy < h / s; ++gy)
    for (int gx = 0; gx < w / s; ++gx)
      for (int py = 0; py < s; ++py)
        for (int px = 0; px < s; ++px) idx.push_back((gy * s + py) * w + (gx * s + px));
  return idx;
}

}  // namespace detail

// Kernel == stride convolution over a feature grid.
template <typename T>
struct PatchConv {
  nn::Linear<T> proj;
  std::vector<int> indices;
  int in_h = 0, in_w = 0, stride = 1, out_h = 0, out_w = 0;

  PatchConv() = default;
  PatchConv(nn::ParamStore<T>& ps, const std::string& name, int h, int w, int s, int in_ch,
            int out_ch)
      : proj(ps, name, s * s * in_ch, out_ch),
        indices(detail::patchify_indices(h, w, s)),
        in_h(h), in_w(w), stride(s), out_h(h / s), out_w(w / s) {}

  FeatureGrid<T> forward(const Var<T>& x) const {
    if (x.rows() != in_h * in_w)
      throw std::invalid_argument("patch conv: expected " + std::to_string(in_h * in_w) +
                                  " input cells, got " + std::to_string(x.rows()));
    int in_ch = x.cols();
    Var<T> g = ag::gather_rows(x, indices);
    g = ag::reshape(g, {out_h * out_w, stride * stride * in_ch});
    return {proj.forward(g), out_h, out_w};
  }
};

// Small pre-norm transformer encoder over the patch grid.
template <typename T>
struct VanillaEncoder {
  PatchConv<T> patch_embed;
  Var<T> pos_emb;
  std::vector<nn::LayerNorm<T>> ln1, ln2;
  std::vector<nn::MultiHeadAttention<T>> attn;
  std::vector<nn::Mlp<T>> mlp;
  nn::LayerNorm<T> ln_out;
  int grid = 0;
  bool use_pos_emb = true;  // disabled only by the translation-equivariance probe

  VanillaEncoder() = default;
  VanillaEncoder(nn::ParamStore<T>& ps, const std::string& name, const ModelConfig& cfg)
      : patch_embed(ps, name + ".patch", cfg.image_size, cfg.image_size, cfg.patch_size, 3,
                    cfg.vanilla_dim),
        grid(cfg.image_size / cfg.patch_size) {
    pos_emb = ps.normal(name + ".pos_emb", {grid * grid, cfg.vanilla_dim}, 0.02);
    for (int l = 0; l < cfg.vanilla_layers; ++l) {
      std::string ln = name + ".block" + std::to_string(l);
      ln1.emplace_back(ps, ln + ".ln1", cfg.vanilla_dim);
      attn.emplace_back(ps, ln + ".attn", cfg.vanilla_dim, cfg.vanilla_dim, cfg.vanilla_heads);
      ln2.emplace_back(ps, ln + ".ln2", cfg.vanilla_dim);
      mlp.emplace_back(ps, ln + ".mlp", cfg.vanilla_dim, 4 * cfg.vanilla_dim, cfg.vanilla_dim);
    }
    ln_out = nn::LayerNorm<T>(ps, name + ".ln_out", cfg.vanilla_dim);
  }

  // frame: (H*W) x 3 in [0, 1] -> f_v grid (g*g) x C_v.
  FeatureGrid<T> forward(const Var<T>& frame) const {
    FeatureGrid<T> g = patch_embed.forward(frame);
    Var<T> x = g.feat;
    if (use_pos_emb) x = ag::add(x, pos_emb);
    for (size_t l = 0; l < attn.size(); ++l) {
      x = ag::add(x, attn[l].forward(ln1[l].forward(x), ln1[l].forward(x)));
      x = ag::add(x, mlp[l].forward(ln2[l].forward(x)));
    }
    x = ln_out.forward(x);
    if (!x.val().all_finite())
      throw std::runtime_error("vanilla encoder: non-finite output");
    return {x, g.h, g.w};
  }
};

// Strided conv stack; scale j (0-based, finest first) has stride 4 * 2^j.
template <typename T>
struct PyramidEncoder {
  PatchConv<T> stem;
  std::vector<PatchConv<T>> merges;
  int levels = 0;

  PyramidEncoder() = default;
  PyramidEncoder(nn::ParamStore<T>& ps, const std::string& name, const ModelConfig& cfg)
      : levels(cfg.num_fvp_layers) {
    int n = cfg.image_size;
    stem = PatchConv<T>(ps, name + ".stem", n, n, 4, 3, cfg.scale_channels(0));
    int h = n / 4;
    for (int j = 1; j < levels; ++j) {
      merges.emplace_back(ps, name + ".merge" + std::to_string(j), h, h, 2,
                          cfg.scale_channels(j - 1), cfg.scale_channels(j));
      h /= 2;
    }
  }

  MultiScaleFeatures<T> forward(const Var<T>& frame) const {
    MultiScaleFeatures<T> out;
    FeatureGrid<T> cur = stem.forward(frame);
    cur.feat = ag::gelu(cur.feat);
    out.scales.push_back(cur);
    for (const auto& merge : merges) {
      cur = merge.forward(cur.feat);
      cur.feat = ag::gelu(cur.feat);
      out.scales.push_back(cur);
    }
    for (const auto& s : out.scales)
      if (!s.feat.val().all_finite())
        throw std::runtime_error("pyramid encoder: non-finite output");
    return out;
  }
};

// Visual-prompt feature sampling over the f_v grid. Box: mean of cells whose
// centers fall inside the box; mask: mean over cells with >= 50% coverage;
// point: nearest cell. Empty rasterizations fall back to the single nearest
// cell and set `fallback`.
template <typename T>
struct SampledPrompt {
  Var<T> embed;  // 1 x C_v, mean of the selected cells
  std::vector<int> cells;
  bool fallback = false;
};

template <typename T>
SampledPrompt<T> sample_visual_prompt(const FeatureGrid<T>& f_v, const Region& region,
                                      int image_size) {
  int gh = f_v.h, gw = f_v.w;
  std::vector<int> cells;
  bool fallback = false;
  auto clamp_cell = [&](int cy, int cx) {
    cy = std::clamp(cy, 0, gh - 1);
    cx = std::clamp(cx, 0, gw - 1);
    return cy * gw + cx;
  };
  switch (region.kind) {
    case Region::Kind::box: {
      double x0 = region.box[0], y0 = region.box[1], x1 = region.box[2], y1 = region.box[3];
      if (x1 <= x0 || y1 <= y0)
        throw std::invalid_argument("sample_visual_prompt: box has no area");
      for (int cy = 0; cy < gh; ++cy)
        for (int cx = 0; cx < gw; ++cx) {
          double ux = (cx + 0.5) / gw, uy = (cy + 0.5) / gh;
          if (ux >= x0 && ux < x1 && uy >= y0 && uy < y1) cells.push_back(cy * gw + cx);
        }
      if (cells.empty()) {
        fallback = true;
        cells.push_back(clamp_cell(static_cast<int>((y0 + y1) / 2 * gh),
                                   static_cast<int>((x0 + x1) / 2 * gw)));
      }
      break;
    }
    case Region::Kind::point: {
      double px = region.point[0], py = region.point[1];
      if (px < 0 || px > 1 || py < 0 || py > 1)
        throw std::invalid_argument("sample_visual_prompt: point out of bounds");
      cells.push_back(clamp_cell(static_cast<int>(py * gh), static_cast<int>(px * gw)));
      break;
    }
    case Region::Kind::mask: {
      const BinMask& m = region.mask;
      if (m.h != image_size || m.w != image_size)
        throw std::invalid_argument("sample_visual_prompt: mask resolution mismatch");
      if (m.empty()) throw std::invalid_argument("sample_visual_prompt: empty mask region");
      int cell_px = image_size / gw;
      int best = -1;
      double best_cov = -1;
      for (int cy = 0; cy < gh; ++cy)
        for (int cx = 0; cx < gw; ++cx) {
          std::int64_t covered = 0;
          for (int y = cy * cell_px; y < (cy + 1) * cell_px; ++y)
            for (int x = cx * cell_px; x < (cx + 1) * cell_px; ++x) covered += m.at(y, x);
          double cov = static_cast<double>(covered) / (cell_px * cell_px);
          if (cov >= 0.5) cells.push_back(cy * gw + cx);
          if (cov > best_cov) {
            best_cov = cov;
            best = cy * gw + cx;
          }
        }
      if (cells.empty()) {
        fallback = true;
        cells.push_back(best);
      }
      break;
    }
  }
  SampledPrompt<T> out;
  out.cells = cells;
  out.fallback = fallback;
  out.embed = ag::mean_rows(ag::gather_rows(f_v.feat, cells));
  return out;
}

}  // namespace vlseg
