#pragma once

// ModelConfig: every knob of the model, generator, and trainer, with a flat
// key-value text serialization (one `key = value` per line). Unknown keys are
// rejected. The token vocabulary is derived deterministically from the config.

#include "vlseg/rng.hpp"

#include <algorithm>
#include <array>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

namespace vlseg {

enum class TaskTag { panoptic, referring, reasoning, visual, vis, vos };

inline const std::array<TaskTag, 6> kAllTasks = {TaskTag::panoptic,  TaskTag::referring,
                                                 TaskTag::reasoning, TaskTag::visual,
                                                 TaskTag::vis,       TaskTag::vos};

inline std::string task_name(TaskTag t) {
  switch (t) {
    case TaskTag::panoptic: return "panoptic";
    case TaskTag::referring: return "referring";
    case TaskTag::reasoning: return "reasoning";
    case TaskTag::visual: return "visual";
    case TaskTag::vis: return "vis";
    case TaskTag::vos: return "vos";
  }
  throw std::logic_error("task_name: bad tag");
}

inline TaskTag task_from_name(const std::string& s) {
  for (TaskTag t : kAllTasks)
    if (task_name(t) == s) return t;
  throw std::invalid_argument("unknown task tag: " + s);
}

inline bool is_video_task(TaskTag t) { return t == TaskTag::vis || t == TaskTag::vos; }

enum class Recognition { hybrid, generation_only, decode_only };

inline std::string recognition_name(Recognition r) {
  switch (r) {
    case Recognition::hybrid: return "hybrid";
    case Recognition::generation_only: return "generation_only";
    case Recognition::decode_only: return "decode_only";
  }
  throw std::logic_error("recognition_name: bad value");
}

inline Recognition recognition_from_name(const std::string& s) {
  if (s == "hybrid") return Recognition::hybrid;
  if (s == "generation_only") return Recognition::generation_only;
  if (s == "decode_only") return Recognition::decode_only;
  throw std::invalid_argument("recognition strategy must be one of hybrid, generation_only, "
                              "decode_only; got '" + s + "'");
}

// Shape classes and colors of the synthetic world.
inline const std::vector<std::string>& class_names() {
  static const std::vector<std::string> v = {"circle", "square", "triangle"};
  return v;
}
inline const std::vector<std::string>& color_names() {
  static const std::vector<std::string> v = {"red", "green", "blue", "yellow"};
  return v;
}

struct Vocab {
  std::vector<std::string> tokens;
  std::unordered_map<std::string, int> index;
  int pad = 0, bos = 1, eos = 2, vref = 3, none_id = 4;
  int seg_begin = 0;  // first [SEG_k] id; k in [1, n_seg]
  int n_seg = 0;
  std::vector<int> class_ids;

  int id(const std::string& tok) const {
    auto it = index.find(tok);
    if (it == index.end()) throw std::invalid_argument("token not in vocabulary: '" + tok + "'");
    return it->second;
  }
  bool contains(const std::string& tok) const { return index.count(tok) > 0; }
  const std::string& token(int i) const { return tokens.at(static_cast<size_t>(i)); }
  int size() const { return static_cast<int>(tokens.size()); }
  bool is_seg(int i) const { return i >= seg_begin && i < seg_begin + n_seg; }
  int seg_id(int k) const { return seg_begin + k; }  // k in [0, n_seg)

  std::vector<int> encode(const std::string& text) const {
    std::vector<int> ids;
    std::istringstream is(text);
    std::string tok;
    while (is >> tok) ids.push_back(id(tok));
    return ids;
  }
  std::string decode(const std::vector<int>& ids) const {
    std::string out;
    for (size_t i = 0; i < ids.size(); ++i) {
      if (i) out += ' ';
      out += token(ids[i]);
    }
    return out;
  }
};

inline Vocab build_vocab(int num_mask_tokens) {
  Vocab v;
  auto push = [&](const std::string& s) {
    v.index[s] = static_cast<int>(v.tokens.size());
    v.tokens.push_back(s);
  };
  push("[PAD]");
  push("[BOS]");
  push("[EOS]");
  push("[VREF]");
  push("none");
  for (const auto& c : class_names()) {
    v.class_ids.push_back(static_cast<int>(v.tokens.size()));
    push(c);
  }
  for (const auto& c : color_names()) push(c);
  for (const char* w : {"the", "object", "that", "can", "roll", "stack", "with", "three",
                        "corners", "segment", "all", "objects", "by", "class", "expression",
                        "given", "regions"})
    push(w);
  v.seg_begin = static_cast<int>(v.tokens.size());
  v.n_seg = num_mask_tokens;
  for (int k = 1; k <= num_mask_tokens; ++k) push("[SEG_" + std::to_string(k) + "]");
  return v;
}

struct ModelConfig {
  // model dims
  int embed_dim = 128;        // D_model
  int predictor_dim = 64;     // D
  int num_mask_tokens = 20;   // N
  int num_fvp_tokens = 16;    // M
  int num_fvp_layers = 3;     // J, pyramid scale count
  int image_size = 64;        // H == W
  int patch_size = 16;        // vanilla encoder patch
  int vanilla_dim = 64;
  int vanilla_layers = 2;
  int vanilla_heads = 4;
  int pyramid_base_channels = 32;  // doubles per scale
  int fvp_heads = 4;
  int llm_layers = 4;
  int llm_heads = 4;
  int context_len = 512;
  int predictor_rounds = 3;
  int predictor_heads = 4;
  int temporal_window = 4;    // T
  int video_frames = 3;
  int lora_rank = 8;
  int seed = 0;

  // loss weights (paper defaults: all 1.0)
  double lambda_mask = 1.0;
  double lambda_cls = 1.0;
  double lambda_ins = 1.0;
  double lambda_bce = 1.0;
  double lambda_dice = 1.0;
  double tau_ins = 0.1;
  double noobj_weight = 0.1;

  // behavior flags
  bool fvp_enabled = true;
  bool fvp_gate = true;             // conditional weight on/off
  bool fvp_per_channel_gate = false;
  bool fvp_key_pos = false;         // 2-D sinusoidal encodings on FVP keys
  bool masked_attention = true;
  bool temporal_global = true;
  bool temporal_local = true;
  bool temporal_include_current = false;  // global mode: replace vs include_current
  Recognition recognition = Recognition::hybrid;
  bool use_lora = false;
  bool freeze_towers = false;

  // training
  double lr = 1.5e-3;
  double weight_decay = 0.0;
  int warmup_steps = 50;
  double grad_clip = 1.0;
  int batch_size = 8;
  int train_steps = 3000;
  int eval_interval = 500;

  // synthetic world
  int max_objects = 3;
  double no_target_fraction = 0.15;
  std::map<std::string, double> task_weights = {
      {"panoptic", 1.0}, {"referring", 1.0}, {"reasoning", 1.0},
      {"visual", 1.0},   {"vis", 1.0},       {"vos", 1.0}};

  // inference thresholds
  double mask_threshold = 0.5;
  double target_threshold = 0.5;
  double link_threshold = 0.5;

  Vocab vocab;  // derived; filled by validate_config / finalize

  int num_classes() const { return static_cast<int>(class_names().size()); }
  int vision_tokens() const {
    return (image_size / patch_size) * (image_size / patch_size);
  }
  int pyramid_stride() const { return 4 << (num_fvp_layers - 1); }
  int scale_channels(int j) const { return pyramid_base_channels << j; }  // j in [0, J)
};

// Validates invariants and fills the derived vocabulary. Reports the first
// violated invariant by field name.
inline ModelConfig validate_config(ModelConfig cfg) {
  auto positive = [](int v, const char* field) {
    if (v <= 0) throw std::invalid_argument(std::string(field) + " must be positive");
  };
  positive(cfg.embed_dim, "embed_dim");
  positive(cfg.predictor_dim, "predictor_dim");
  positive(cfg.num_mask_tokens, "num_mask_tokens");
  positive(cfg.num_fvp_tokens, "num_fvp_tokens");
  positive(cfg.num_fvp_layers, "num_fvp_layers");
  positive(cfg.image_size, "image_size");
  positive(cfg.patch_size, "patch_size");
  positive(cfg.vanilla_dim, "vanilla_dim");
  positive(cfg.vanilla_layers, "vanilla_layers");
  positive(cfg.pyramid_base_channels, "pyramid_base_channels");
  positive(cfg.llm_layers, "llm_layers");
  positive(cfg.llm_heads, "llm_heads");
  positive(cfg.context_len, "context_len");
  positive(cfg.predictor_rounds, "predictor_rounds");
  positive(cfg.temporal_window, "temporal_window");
  positive(cfg.video_frames, "video_frames");
  positive(cfg.lora_rank, "lora_rank");
  positive(cfg.batch_size, "batch_size");
  positive(cfg.train_steps, "train_steps");
  positive(cfg.max_objects, "max_objects");

  for (auto [v, f] : std::initializer_list<std::pair<double, const char*>>{
           {cfg.lambda_mask, "lambda_mask"},
           {cfg.lambda_cls, "lambda_cls"},
           {cfg.lambda_ins, "lambda_ins"},
           {cfg.lambda_bce, "lambda_bce"},
           {cfg.lambda_dice, "lambda_dice"}})
    if (v < 0) throw std::invalid_argument(std::string(f) + " must be non-negative");

  if (cfg.lr <= 0) throw std::invalid_argument("lr must be positive");
  if (cfg.tau_ins <= 0) throw std::invalid_argument("tau_ins must be positive");
  if (cfg.num_mask_tokens < cfg.max_objects)
    throw std::invalid_argument("num_mask_tokens must be >= max_objects");
  if (cfg.image_size % cfg.patch_size != 0)
    throw std::invalid_argument("image_size must be divisible by patch_size");
  if (cfg.image_size % cfg.pyramid_stride() != 0)
    throw std::invalid_argument("image_size must be divisible by the pyramid stride (4 * 2^(J-1))");
  if (cfg.embed_dim % cfg.llm_heads != 0)
    throw std::invalid_argument("embed_dim must be divisible by llm_heads");
  if (cfg.embed_dim % cfg.fvp_heads != 0)
    throw std::invalid_argument("embed_dim must be divisible by fvp_heads");
  if (cfg.predictor_dim % cfg.predictor_heads != 0)
    throw std::invalid_argument("predictor_dim must be divisible by predictor_heads");
  if (cfg.vanilla_dim % cfg.vanilla_heads != 0)
    throw std::invalid_argument("vanilla_dim must be divisible by vanilla_heads");
  if (cfg.video_frames < 2)
    throw std::invalid_argument("video_frames must be >= 2");
  for (const auto& [k, w] : cfg.task_weights)
    if (w < 0) throw std::invalid_argument("task_weight_" + k + " must be non-negative");

  cfg.vocab = build_vocab(cfg.num_mask_tokens);
  for (const auto& c : class_names())
    if (!cfg.vocab.contains(c))
      throw std::invalid_argument("vocab missing class token " + c);
  return cfg;
}

namespace detail {

template <typename F>
void for_each_key(ModelConfig& c, F&& f) {
  f("embed_dim", c.embed_dim);
  f("predictor_dim", c.predictor_dim);
  f("num_mask_tokens", c.num_mask_tokens);
  f("num_fvp_tokens", c.num_fvp_tokens);
  f("num_fvp_layers", c.num_fvp_layers);
  f("image_size", c.image_size);
  f("patch_size", c.patch_size);
  f("vanilla_dim", c.vanilla_dim);
  f("vanilla_layers", c.vanilla_layers);
  f("vanilla_heads", c.vanilla_heads);
  f("pyramid_base_channels", c.pyramid_base_channels);
  f("fvp_heads", c.fvp_heads);
  f("llm_layers", c.llm_layers);
  f("llm_heads", c.llm_heads);
  f("context_len", c.context_len);
  f("predictor_rounds", c.predictor_rounds);
  f("predictor_heads", c.predictor_heads);
  f("temporal_window", c.temporal_window);
  f("video_frames", c.video_frames);
  f("lora_rank", c.lora_rank);
  f("seed", c.seed);
  f("lambda_mask", c.lambda_mask);
  f("lambda_cls", c.lambda_cls);
  f("lambda_ins", c.lambda_ins);
  f("lambda_bce", c.lambda_bce);
  f("lambda_dice", c.lambda_dice);
  f("tau_ins", c.tau_ins);
  f("noobj_weight", c.noobj_weight);
  f("fvp_enabled", c.fvp_enabled);
  f("fvp_gate", c.fvp_gate);
  f("fvp_per_channel_gate", c.fvp_per_channel_gate);
  f("fvp_key_pos", c.fvp_key_pos);
  f("masked_attention", c.masked_attention);
  f("temporal_global", c.temporal_global);
  f("temporal_local", c.temporal_local);
  f("temporal_include_current", c.temporal_include_current);
  f("use_lora", c.use_lora);
  f("freeze_towers", c.freeze_towers);
  f("lr", c.lr);
  f("weight_decay", c.weight_decay);
  f("warmup_steps", c.warmup_steps);
  f("grad_clip", c.grad_clip);
  f("batch_size", c.batch_size);
  f("train_steps", c.train_steps);
  f("eval_interval", c.eval_interval);
  f("max_objects", c.max_objects);
  f("no_target_fraction", c.no_target_fraction);
  f("mask_threshold", c.mask_threshold);
  f("target_threshold", c.target_threshold);
  f("link_threshold", c.link_threshold);
}

inline std::string format_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace detail

inline std::string serialize_config(const ModelConfig& cfg) {
  std::ostringstream os;
  ModelConfig& c = const_cast<ModelConfig&>(cfg);
  detail::for_each_key(c, [&](const char* key, auto& field) {
    using F = std::decay_t<decltype(field)>;
    os << key << " = ";
    if constexpr (std::is_same_v<F, bool>)
      os << (field ? 1 : 0);
    else if constexpr (std::is_same_v<F, double>)
      os << detail::format_double(field);
    else
      os << field;
    os << "\n";
  });
  os << "recognition = " << recognition_name(cfg.recognition) << "\n";
  for (const auto& [k, w] : cfg.task_weights)
    os << "task_weight_" << k << " = " << detail::format_double(w) << "\n";
  return os.str();
}

// Applies `key = value` lines on top of `base`. Unknown keys are errors.
inline ModelConfig parse_config(const std::string& text, ModelConfig base = {}) {
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  auto trim = [](std::string s) {
    size_t b = s.find_first_not_of(" \t\r");
    size_t e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
  };
  while (std::getline(is, line)) {
    ++lineno;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    size_t eq = t.find('=');
    if (eq == std::string::npos)
      throw std::invalid_argument("config line " + std::to_string(lineno) +
                                  ": expected 'key = value'");
    std::string key = trim(t.substr(0, eq));
    std::string value = trim(t.substr(eq + 1));
    bool found = false;
    detail::for_each_key(base, [&](const char* k, auto& field) {
      if (found || key != k) return;
      found = true;
      using F = std::decay_t<decltype(field)>;
      std::istringstream vs(value);
      if constexpr (std::is_same_v<F, bool>) {
        int b;
        vs >> b;
        if (vs.fail() || (b != 0 && b != 1))
          throw std::invalid_argument("config key " + key + ": expected 0 or 1");
        field = (b == 1);
      } else {
        vs >> field;
        if (vs.fail())
          throw std::invalid_argument("config key " + key + ": cannot parse '" + value + "'");
      }
    });
    if (!found) {
      if (key == "recognition") {
        base.recognition = recognition_from_name(value);
        found = true;
      } else if (key.rfind("task_weight_", 0) == 0) {
        std::string task = key.substr(12);
        if (!base.task_weights.count(task))
          throw std::invalid_argument("unknown config key: " + key);
        base.task_weights[task] = std::stod(value);
        found = true;
      }
    }
    if (!found) throw std::invalid_argument("unknown config key: " + key);
  }
  return base;
}

inline ModelConfig load_config_file(const std::string& path, ModelConfig base = {}) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open config file: " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config(ss.str(), std::move(base));
}

inline bool config_equal(const ModelConfig& a, const ModelConfig& b) {
  return serialize_config(a) == serialize_config(b);
}

// Per-key diff of two serialized configs, for checkpoint mismatch messages.
inline std::string config_diff(const ModelConfig& a, const ModelConfig& b) {
  std::istringstream sa(serialize_config(a)), sb(serialize_config(b));
  std::string la, lb, out;
  while (std::getline(sa, la) && std::getline(sb, lb))
    if (la != lb) out += "  checkpoint: " + la + "  |  requested: " + lb + "\n";
  return out;
}

}  // namespace vlseg
