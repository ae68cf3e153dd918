#pragma once

// Parameter registry and the small set of layers the model is built from.

#include "vlseg/autograd.hpp"
#include "vlseg/rng.hpp"

#include <map>
#include <memory>
#include <optional>
#include <string>

namespace vlseg::nn {

using ag::Var;

// Ordered name -> parameter map. Iteration order is the registration order,
// which keeps optimizer updates and checkpoints deterministic.
template <typename T>
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t init_seed) : rng_(init_seed) {}

  Var<T> param(const std::string& name, std::vector<int> shape,
               std::function<T(Rng&)> init) {
    if (by_name_.count(name)) throw std::runtime_error("duplicate parameter: " + name);
    Tensor<T> t(shape);
    for (auto& v : t.data) v = init(rng_);
    entries_.push_back({name, Var<T>(std::move(t), true), true});
    by_name_[name] = entries_.size() - 1;
    return entries_.back().var;
  }

  Var<T> zeros(const std::string& name, std::vector<int> shape) {
    return param(name, std::move(shape), [](Rng&) { return T(0); });
  }
  Var<T> normal(const std::string& name, std::vector<int> shape, double stddev) {
    return param(name, std::move(shape),
                 [stddev](Rng& r) { return static_cast<T>(r.normal(0.0, stddev)); });
  }
  Var<T> xavier(const std::string& name, std::vector<int> shape) {
    double fan_in = shape.back(), fan_out = shape.front();
    double bound = std::sqrt(6.0 / (fan_in + fan_out));
    return param(name, std::move(shape),
                 [bound](Rng& r) { return static_cast<T>(r.uniform(-bound, bound)); });
  }
  Var<T> ones(const std::string& name, std::vector<int> shape) {
    return param(name, std::move(shape), [](Rng&) { return T(1); });
  }

  struct Entry {
    std::string name;
    Var<T> var;
    bool trainable;
  };

  size_t size() const { return entries_.size(); }
  Entry& entry(size_t i) { return entries_[i]; }
  const Entry& entry(size_t i) const { return entries_[i]; }

  Var<T>* find(const std::string& name) {
    auto it = by_name_.find(name);
    return it == by_name_.end() ? nullptr : &entries_[it->second].var;
  }

  void set_trainable_prefix(const std::string& prefix, bool trainable) {
    for (auto& e : entries_)
      if (e.name.rfind(prefix, 0) == 0) {
        e.trainable = trainable;
        e.var.node()->requires_grad = trainable;
      }
  }

  void zero_grad() {
    for (auto& e : entries_) {
      auto& g = e.var.grad();
      std::fill(g.data.begin(), g.data.end(), T(0));
    }
  }

  std::int64_t num_params() const {
    std::int64_t n = 0;
    for (const auto& e : entries_) n += e.var.val().size();
    return n;
  }

 private:
  std::vector<Entry> entries_;
  std::map<std::string, size_t> by_name_;
  Rng rng_;
};

// Affine map y = x W^T + b, x: S x in, W: out x in. Optional low-rank adapter
// (A: in x r, B: r x out, B zero-initialized) adds (x A) B to the output.
template <typename T>
struct Linear {
  Var<T> weight;  // out x in
  Var<T> bias;    // 1 x out, optional
  Var<T> lora_a;  // in x r
  Var<T> lora_b;  // r x out
  bool has_bias = true;
  bool has_lora = false;

  Linear() = default;
  Linear(ParamStore<T>& ps, const std::string& name, int in, int out, bool with_bias = true)
      : has_bias(with_bias) {
    weight = ps.xavier(name + ".weight", {out, in});
    if (with_bias) bias = ps.zeros(name + ".bias", {1, out});
  }

  void attach_lora(ParamStore<T>& ps, const std::string& name, int rank) {
    int in = weight.cols(), out = weight.rows();
    lora_a = ps.normal(name + ".lora_a", {in, rank}, 0.02);
    lora_b = ps.zeros(name + ".lora_b", {rank, out});
    has_lora = true;
  }

  Var<T> forward(const Var<T>& x) const {
    Var<T> y = ag::matmul_nt(x, weight);
    if (has_bias) y = ag::add_rowvec(y, bias);
    if (has_lora) y = ag::add(y, ag::matmul(ag::matmul(x, lora_a), lora_b));
    return y;
  }
};

template <typename T>
struct LayerNorm {
  Var<T> gain;
  Var<T> bias;

  LayerNorm() = default;
  LayerNorm(ParamStore<T>& ps, const std::string& name, int dim) {
    gain = ps.ones(name + ".gain", {1, dim});
    bias = ps.zeros(name + ".bias", {1, dim});
  }

  Var<T> forward(const Var<T>& x) const { return ag::layer_norm_rows(x, gain, bias); }
};

// Multi-head attention. Queries come from q_in, keys/values from kv_in.
// attn_bias (optional, no grad) is added to the pre-softmax scores; shape
// S_q x S_kv. Used for causal masking and predictor masked attention.
template <typename T>
struct MultiHeadAttention {
  Linear<T> wq, wk, wv, wo;
  int heads = 1;
  int dim = 0;

  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore<T>& ps, const std::string& name, int model_dim, int kv_dim,
                     int n_heads)
      : heads(n_heads), dim(model_dim) {
    if (model_dim % n_heads != 0)
      throw std::invalid_argument("attention: dim must be divisible by heads");
    wq = Linear<T>(ps, name + ".wq", model_dim, model_dim);
    wk = Linear<T>(ps, name + ".wk", kv_dim, model_dim);
    wv = Linear<T>(ps, name + ".wv", kv_dim, model_dim);
    wo = Linear<T>(ps, name + ".wo", model_dim, model_dim);
  }

  void attach_lora(ParamStore<T>& ps, const std::string& name, int rank) {
    wq.attach_lora(ps, name + ".wq", rank);
    wk.attach_lora(ps, name + ".wk", rank);
    wv.attach_lora(ps, name + ".wv", rank);
    wo.attach_lora(ps, name + ".wo", rank);
  }

  Var<T> forward(const Var<T>& q_in, const Var<T>& kv_in,
                 const Tensor<T>* attn_bias = nullptr) const {
    Var<T> q = wq.forward(q_in);
    Var<T> k = wk.forward(kv_in);
    Var<T> v = wv.forward(kv_in);
    int dh = dim / heads;
    double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    std::vector<Var<T>> outs;
    outs.reserve(static_cast<size_t>(heads));
    for (int h = 0; h < heads; ++h) {
      Var<T> qh = ag::slice_cols(q, h * dh, dh);
      Var<T> kh = ag::slice_cols(k, h * dh, dh);
      Var<T> vh = ag::slice_cols(v, h * dh, dh);
      Var<T> scores = ag::scalar_mul(ag::matmul_nt(qh, kh), scale);
      Var<T> attn = ag::softmax_rows(scores, attn_bias);
      outs.push_back(ag::matmul(attn, vh));
    }
    return wo.forward(ag::concat_cols(outs));
  }
};

// Two-layer MLP with GELU.
template <typename T>
struct Mlp {
  Linear<T> fc1, fc2;

  Mlp() = default;
  Mlp(ParamStore<T>& ps, const std::string& name, int in, int hidden, int out) {
    fc1 = Linear<T>(ps, name + ".fc1", in, hidden);
    fc2 = Linear<T>(ps, name + ".fc2", hidden, out);
  }

  Var<T> forward(const Var<T>& x) const { return fc2.forward(ag::gelu(fc1.forward(x))); }
};

// Additive bias blocking attention to masked-out keys.
template <typename T>
inline Tensor<T> causal_bias(int s) {
  Tensor<T> b({s, s});
  for (int i = 0; i < s; ++i)
    for (int j = i + 1; j < s; ++j) b.at(i, j) = static_cast<T>(-1e9);
  return b;
}

// Fixed 2-D sine/cosine positional table for an h x w grid, dim channels.
template <typename T>
inline Tensor<T> sincos_grid(int h, int w, int dim) {
  Tensor<T> pe({h * w, dim});
  int half = dim / 2;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      int row = y * w + x;
      for (int i = 0; i < half; ++i) {
        double freq = std::pow(10000.0, -2.0 * (i / 2) / half);
        double v = (i % 2 == 0) ? std::sin(y * freq) : std::cos(y * freq);
        pe.at(row, i) = static_cast<T>(v);
      }
      for (int i = half; i < dim; ++i) {
        int k = i - half;
        double freq = std::pow(10000.0, -2.0 * (k / 2) / (dim - half));
        double v = (k % 2 == 0) ? std::sin(x * freq) : std::cos(x * freq);
        pe.at(row, i) = static_cast<T>(v);
      }
    }
  return pe;
}

}  // namespace vlseg::nn
