#pragma once

// Checkpoint = config snapshot + named parameter arrays with a shape
// manifest + rng stream state + (optionally) optimizer moments. Loading
// against a mismatched config fails with a per-key diff; missing or extra
// parameter names are reported by name, never coerced.

#include "vlseg/config.hpp"
#include "vlseg/model.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

namespace vlseg::ckpt {

inline constexpr char kMagic[8] = {'V', 'L', 'S', 'G', 'C', 'K', 'P', '1'};

struct OptimizerState {
  std::int64_t step = 0;
  std::vector<TensorF> m, v;  // ordered like the parameter store
};

struct Checkpoint {
  ModelConfig cfg;  // validated
  std::string rng_state;
  std::int64_t step = 0;
  std::vector<std::pair<std::string, TensorF>> params;
  std::optional<OptimizerState> optimizer;
};

namespace detail {

template <typename V>
void write_pod(std::ofstream& f, const V& v) {
  f.write(reinterpret_cast<const char*>(&v), sizeof(V));
}
template <typename V>
V read_pod(std::ifstream& f, const std::string& path) {
  V v{};
  f.read(reinterpret_cast<char*>(&v), sizeof(V));
  if (!f) throw std::runtime_error("checkpoint truncated: " + path);
  return v;
}
inline void write_blob(std::ofstream& f, const std::string& s) {
  write_pod<std::uint64_t>(f, s.size());
  f.write(s.data(), static_cast<std::streamsize>(s.size()));
}
inline std::string read_blob(std::ifstream& f, const std::string& path) {
  auto len = read_pod<std::uint64_t>(f, path);
  std::string s(len, '\0');
  f.read(s.data(), static_cast<std::streamsize>(len));
  if (!f) throw std::runtime_error("checkpoint truncated: " + path);
  return s;
}
inline void write_tensor(std::ofstream& f, const TensorF& t) {
  write_pod<std::uint32_t>(f, static_cast<std::uint32_t>(t.ndim()));
  for (int d : t.shape) write_pod<std::int32_t>(f, d);
  f.write(reinterpret_cast<const char*>(t.data.data()),
          static_cast<std::streamsize>(t.data.size() * sizeof(float)));
}
inline TensorF read_tensor(std::ifstream& f, const std::string& path) {
  auto ndim = read_pod<std::uint32_t>(f, path);
  std::vector<int> shape;
  for (std::uint32_t i = 0; i < ndim; ++i) shape.push_back(read_pod<std::int32_t>(f, path));
  TensorF t(shape);
  f.read(reinterpret_cast<char*>(t.data.data()),
         static_cast<std::streamsize>(t.data.size() * sizeof(float)));
  if (!f) throw std::runtime_error("checkpoint truncated: " + path);
  return t;
}

}  // namespace detail

inline void save_checkpoint(const std::string& path, const SegModel<float>& model,
                            const std::string& rng_state, std::int64_t step,
                            const OptimizerState* opt = nullptr) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot write checkpoint: " + path);
  f.write(kMagic, sizeof(kMagic));
  detail::write_pod<std::uint32_t>(f, 1u);  // version
  detail::write_blob(f, serialize_config(model.config()));
  detail::write_blob(f, rng_state);
  detail::write_pod<std::int64_t>(f, step);
  detail::write_pod<std::uint32_t>(f, opt ? 1u : 0u);
  const auto& ps = model.params();
  detail::write_pod<std::uint64_t>(f, ps.size());
  for (size_t i = 0; i < ps.size(); ++i) {
    detail::write_blob(f, ps.entry(i).name);
    detail::write_tensor(f, ps.entry(i).var.val());
  }
  if (opt) {
    detail::write_pod<std::int64_t>(f, opt->step);
    for (size_t i = 0; i < ps.size(); ++i) {
      detail::write_tensor(f, opt->m[i]);
      detail::write_tensor(f, opt->v[i]);
    }
  }
  if (!f) throw std::runtime_error("short write on checkpoint: " + path);
}

inline Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[8];
  f.read(magic, sizeof(magic));
  if (!f || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("not a checkpoint file (bad magic): " + path);
  auto version = detail::read_pod<std::uint32_t>(f, path);
  if (version != 1)
    throw std::runtime_error("unsupported checkpoint version " + std::to_string(version));
  Checkpoint c;
  c.cfg = validate_config(parse_config(detail::read_blob(f, path)));
  c.rng_state = detail::read_blob(f, path);
  c.step = detail::read_pod<std::int64_t>(f, path);
  bool has_opt = detail::read_pod<std::uint32_t>(f, path) != 0;
  auto count = detail::read_pod<std::uint64_t>(f, path);
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = detail::read_blob(f, path);
    c.params.push_back({std::move(name), detail::read_tensor(f, path)});
  }
  if (has_opt) {
    OptimizerState opt;
    opt.step = detail::read_pod<std::int64_t>(f, path);
    for (std::uint64_t i = 0; i < count; ++i) {
      opt.m.push_back(detail::read_tensor(f, path));
      opt.v.push_back(detail::read_tensor(f, path));
    }
    c.optimizer = std::move(opt);
  }
  return c;
}

// Copies checkpoint parameters into a freshly built model. The model's config
// must already match; names and shapes are checked strictly.
inline void apply_parameters(SegModel<float>& model, const Checkpoint& c) {
  auto& ps = model.params();
  if (c.params.size() != ps.size())
    throw std::runtime_error("checkpoint has " + std::to_string(c.params.size()) +
                             " parameters, model expects " + std::to_string(ps.size()));
  for (size_t i = 0; i < ps.size(); ++i) {
    auto& entry = ps.entry(i);
    const auto& [name, tensor] = c.params[i];
    if (name != entry.name)
      throw std::runtime_error("checkpoint parameter order mismatch: '" + name +
                               "' vs model '" + entry.name + "'");
    if (tensor.shape != entry.var.val().shape)
      throw std::runtime_error("checkpoint parameter '" + name + "' has shape " +
                               tensor.shape_str() + ", model expects " +
                               entry.var.val().shape_str());
    entry.var.node()->value = tensor;
  }
}

// Guard used by train/eval entry points: a checkpoint may only be loaded into
// an identical configuration; on mismatch the differing keys are listed.
inline void require_config_match(const ModelConfig& ckpt_cfg, const ModelConfig& requested) {
  if (!config_equal(ckpt_cfg, requested))
    throw std::runtime_error("checkpoint config mismatch:\n" +
                             config_diff(ckpt_cfg, requested));
}

}  // namespace vlseg::ckpt
