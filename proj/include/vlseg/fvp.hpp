#pragma once

// Fine-grained visual perceiver: M learnable tokens enriched scale-by-scale
// with pyramid features through cross-attention, gated by a tanh "conditional
// weight" whose MLP head is zero-initialized. At initialization every fusion
// layer is therefore a bit-exact identity.

#include "vlseg/encoders.hpp"
#include "vlseg/nn.hpp"

#include <optional>
#include <string>
#include <vector>

namespace vlseg {

template <typename T>
struct FvpLayer {
  nn::Linear<T> key_proj;  // G_p for this scale
  nn::MultiHeadAttention<T> attn;
  nn::Linear<T> gate_fc1;
  nn::Linear<T> gate_fc2;  // zero-initialized so the gate starts at 0
  bool gated = true;
  bool per_channel = false;
  std::optional<T> gate_override;  // test hook: force a fixed gate value
  Tensor<T> key_pos;               // optional 2-D sinusoid on the keys
  bool use_key_pos = false;

  FvpLayer() = default;
  FvpLayer(nn::ParamStore<T>& ps, const std::string& name, const ModelConfig& cfg,
           int scale_channels, int scale_h, int scale_w)
      : key_proj(ps, name + ".key_proj", scale_channels, cfg.embed_dim),
        attn(ps, name + ".attn", cfg.embed_dim, cfg.embed_dim, cfg.fvp_heads),
        gated(cfg.fvp_gate),
        per_channel(cfg.fvp_per_channel_gate),
        use_key_pos(cfg.fvp_key_pos) {
    int gate_out = per_channel ? cfg.embed_dim : 1;
    gate_fc1 = nn::Linear<T>(ps, name + ".gate_fc1", cfg.embed_dim, cfg.embed_dim);
    gate_fc2 = nn::Linear<T>(ps, name + ".gate_fc2", cfg.embed_dim, gate_out);
    for (auto& v : gate_fc2.weight.node()->value.data) v = T(0);
    if (use_key_pos) key_pos = nn::sincos_grid<T>(scale_h, scale_w, cfg.embed_dim);
  }

  // P_j = P_{j-1} + tanh(MLP(H)) * H,  H = MHCA(P_{j-1}, G_p(f_img_j)).
  Var<T> forward(const Var<T>& tokens, const FeatureGrid<T>& scale) const {
    Var<T> keys = key_proj.forward(scale.feat);
    if (use_key_pos) keys = ag::add(keys, ag::constant(key_pos));
    Var<T> enriched = attn.forward(tokens, keys);
    if (!gated && !gate_override) return ag::add(tokens, enriched);
    Var<T> update;
    if (gate_override) {
      update = ag::scalar_mul(enriched, static_cast<double>(*gate_override));
    } else {
      Var<T> gate = ag::tanh_op(gate_fc2.forward(ag::gelu(gate_fc1.forward(enriched))));
      update = per_channel ? ag::mul(enriched, gate) : ag::mul_colvec(enriched, gate);
    }
    return ag::add(tokens, update);
  }
};

template <typename T>
struct Fvp {
  Var<T> init_tokens;  // learnable P_0, M x D_model
  std::vector<FvpLayer<T>> layers;

  Fvp() = default;
  Fvp(nn::ParamStore<T>& ps, const std::string& name, const ModelConfig& cfg) {
    init_tokens = ps.normal(name + ".init_tokens", {cfg.num_fvp_tokens, cfg.embed_dim}, 0.02);
    int h = cfg.image_size / 4;
    for (int j = 0; j < cfg.num_fvp_layers; ++j) {
      layers.emplace_back(ps, name + ".layer" + std::to_string(j), cfg, cfg.scale_channels(j),
                          h >> j, h >> j);
    }
  }

  // Sequential fusion, coarsest scale first.
  Var<T> run(const Var<T>& p0, const MultiScaleFeatures<T>& features) const {
    if (features.scales.size() != layers.size())
      throw std::invalid_argument("fvp: expected " + std::to_string(layers.size()) +
                                  " scales, got " + std::to_string(features.scales.size()));
    Var<T> p = p0;
    for (size_t j = layers.size(); j-- > 0;)
      p = layers[j].forward(p, features.scales[j]);
    return p;
  }
};

}  // namespace vlseg
