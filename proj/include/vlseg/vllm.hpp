#pragma once

// Micro causal language model standing in for the VLLM: embeds the assembled
// multimodal sequence (vision tokens, fine-grained tokens, prompt, optional
// teacher-forced target), runs a pre-norm decoder stack with causal masking,
// and exposes per-position output embeddings E_O plus tied-embedding logits.
// Attention projections accept low-rank adapters (B zero-initialized).

#include "vlseg/config.hpp"
#include "vlseg/data.hpp"
#include "vlseg/nn.hpp"

#include <optional>
#include <string>
#include <vector>

namespace vlseg {

using ag::Var;

enum class Role { bos, vision, finegrained, instruction, condition, generated };

struct Span {
  Role role;
  int start = 0;
  int len = 0;
};

template <typename T>
struct TokenLayout {
  struct Segment {
    Role role;
    std::vector<int> ids;  // text segment: vocabulary ids
    Var<T> embeds;         // injected segment: rows x D_model
    bool injected = false;
  };
  std::vector<Segment> segments;
  std::vector<int> ids;    // full sequence; injected positions hold [VREF]
  std::vector<Span> spans;
  std::vector<std::pair<int, int>> condition_groups;  // (start, len) per condition entry
  int gen_start = 0;  // first position of the generated/teacher span (== length if none)
  int length = 0;

  const Span* find_span(Role r) const {
    for (const auto& s : spans)
      if (s.role == r) return &s;
    return nullptr;
  }
};

// Sequence order: [BOS][vision][finegrained][instruction][condition][generated].
// `fine_tokens` may be undefined (FVP disabled). `region_embeds` replace text
// ids for visual conditions; rows must already be in D_model. `target_ids`
// (teacher forcing or decode-only mask-token block) extends the sequence with
// role `generated`.
template <typename T>
TokenLayout<T> assemble_sequence(const Var<T>& vision_tokens, const Var<T>& fine_tokens,
                                 const PromptSpec& prompt,
                                 const std::vector<Var<T>>& region_embeds,
                                 const std::vector<int>& target_ids, const Vocab& vocab,
                                 const ModelConfig& cfg) {
  TokenLayout<T> layout;
  int at = 0;
  auto push_text = [&](Role role, std::vector<int> ids) {
    if (ids.empty()) return;
    int len = static_cast<int>(ids.size());
    layout.segments.push_back({role, ids, {}, false});
    layout.spans.push_back({role, at, len});
    layout.ids.insert(layout.ids.end(), ids.begin(), ids.end());
    at += len;
  };
  auto push_injected = [&](Role role, Var<T> embeds) {
    int len = embeds.rows();
    if (embeds.cols() != cfg.embed_dim)
      throw std::invalid_argument("assemble_sequence: injected embedding dim " +
                                  std::to_string(embeds.cols()) + " != embed_dim " +
                                  std::to_string(cfg.embed_dim));
    layout.segments.push_back({role, {}, std::move(embeds), true});
    layout.spans.push_back({role, at, len});
    layout.ids.insert(layout.ids.end(), static_cast<size_t>(len), vocab.vref);
    at += len;
  };

  push_text(Role::bos, {vocab.bos});
  push_injected(Role::vision, vision_tokens);
  if (fine_tokens.defined()) push_injected(Role::finegrained, fine_tokens);
  push_text(Role::instruction, vocab.encode(prompt.instruction));

  switch (prompt.kind) {
    case PromptSpec::Kind::classes: {
      std::vector<int> ids;
      for (const auto& name : prompt.class_names) {
        layout.condition_groups.push_back({at + static_cast<int>(ids.size()), 1});
        ids.push_back(vocab.id(name));
      }
      push_text(Role::condition, ids);
      break;
    }
    case PromptSpec::Kind::sentence: {
      std::vector<int> ids = vocab.encode(prompt.sentence);
      if (ids.empty()) throw std::invalid_argument("assemble_sequence: empty sentence condition");
      layout.condition_groups.push_back({at, static_cast<int>(ids.size())});
      push_text(Role::condition, ids);
      break;
    }
    case PromptSpec::Kind::regions: {
      if (region_embeds.empty())
        throw std::invalid_argument("assemble_sequence: region prompt without embeddings");
      std::vector<Var<T>> rows = region_embeds;
      for (size_t i = 0; i < rows.size(); ++i)
        layout.condition_groups.push_back({at + static_cast<int>(i), 1});
      push_injected(Role::condition, ag::concat_rows(rows));
      break;
    }
  }

  layout.gen_start = at;
  push_text(Role::generated, target_ids);
  layout.length = at;
  if (layout.length > cfg.context_len)
    throw std::invalid_argument("assemble_sequence: sequence length " +
                                std::to_string(layout.length) + " exceeds context limit " +
                                std::to_string(cfg.context_len));
  return layout;
}

template <typename T>
struct LlmOutput {
  Var<T> e_o;     // S x D_model
  Var<T> logits;  // S x |V| (tied to the embedding matrix)
};

template <typename T>
struct GenerationResult {
  std::vector<int> generated;  // newly generated ids (excludes the prompt)
  std::vector<int> full_ids;   // whole final sequence
  LlmOutput<T> final_pass;     // forward over the full final sequence
  int seg_count = 0;
};

template <typename T>
class MicroVllm {
 public:
  MicroVllm() = default;
  MicroVllm(nn::ParamStore<T>& ps, const std::string& name, const ModelConfig& cfg)
      : cfg_(&cfg) {
    embed_ = ps.normal(name + ".embed", {cfg.vocab.size(), cfg.embed_dim}, 0.02);
    pos_emb_ = ps.normal(name + ".pos_emb", {cfg.context_len, cfg.embed_dim}, 0.02);
    for (int l = 0; l < cfg.llm_layers; ++l) {
      std::string ln = name + ".layer" + std::to_string(l);
      ln1_.emplace_back(ps, ln + ".ln1", cfg.embed_dim);
      attn_.emplace_back(ps, ln + ".attn", cfg.embed_dim, cfg.embed_dim, cfg.llm_heads);
      if (cfg.use_lora) attn_.back().attach_lora(ps, ln + ".attn", cfg.lora_rank);
      ln2_.emplace_back(ps, ln + ".ln2", cfg.embed_dim);
      mlp_.emplace_back(ps, ln + ".mlp", cfg.embed_dim, 4 * cfg.embed_dim, cfg.embed_dim);
    }
    ln_f_ = nn::LayerNorm<T>(ps, name + ".ln_f", cfg.embed_dim);
  }

  Var<T> token_embedding(const std::vector<int>& ids) const {
    return ag::gather_rows(embed_, ids);
  }

  // Input matrix for a layout: text ids through the embedding table, injected
  // segments passed through, plus absolute position embeddings.
  Var<T> input_matrix(const TokenLayout<T>& layout) const {
    std::vector<Var<T>> parts;
    for (const auto& seg : layout.segments)
      parts.push_back(seg.injected ? seg.embeds : token_embedding(seg.ids));
    Var<T> x = ag::concat_rows(parts);
    std::vector<int> pos(static_cast<size_t>(x.rows()));
    for (size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<int>(i);
    return ag::add(x, ag::gather_rows(pos_emb_, pos));
  }

  LlmOutput<T> forward(const TokenLayout<T>& layout) const {
    return forward_embedded(input_matrix(layout));
  }

  LlmOutput<T> forward_embedded(Var<T> x) const {
    Tensor<T> bias = nn::causal_bias<T>(x.rows());
    for (size_t l = 0; l < attn_.size(); ++l) {
      Var<T> h = ln1_[l].forward(x);
      x = ag::add(x, attn_[l].forward(h, h, &bias));
      x = ag::add(x, mlp_[l].forward(ln2_[l].forward(x)));
    }
    Var<T> e_o = ln_f_.forward(x);
    if (!e_o.val().all_finite())
      throw std::runtime_error("llm forward: non-finite output embeddings (NaN guard)");
    return {e_o, ag::matmul_nt(e_o, embed_)};
  }

  // Greedy decoding from the end of the layout. Stops at EOS or once
  // `num_mask_tokens` mask tokens have been emitted; reaching max_len first
  // is an error naming the deficit. `allowed` (optional) restricts the
  // argmax to a token subset.
  GenerationResult<T> generate(const TokenLayout<T>& layout, int max_len,
                               const std::vector<int>* allowed = nullptr) const {
    const Vocab& vocab = cfg_->vocab;
    if (layout.length + max_len > cfg_->context_len)
      throw std::invalid_argument("generate: layout length + max_len exceeds context limit");
    ag::NoGradGuard no_grad;
    GenerationResult<T> res;
    res.full_ids = layout.ids;
    Var<T> x = input_matrix(layout);
    bool stopped = false;
    for (int step = 0; step < max_len && !stopped; ++step) {
      LlmOutput<T> out = forward_embedded(x);
      int next = argmax_row(out.logits.val(), x.rows() - 1, allowed);
      res.generated.push_back(next);
      res.full_ids.push_back(next);
      x = append_token(x, next, x.rows());
      if (vocab.is_seg(next)) ++res.seg_count;
      stopped = (next == vocab.eos || res.seg_count >= vocab.n_seg);
    }
    if (!stopped && res.seg_count < vocab.n_seg)
      throw std::runtime_error(
          "generate: max_len " + std::to_string(max_len) + " reached after " +
          std::to_string(res.seg_count) + " of " + std::to_string(vocab.n_seg) +
          " mask tokens (deficit " + std::to_string(vocab.n_seg - res.seg_count) + ")");
    res.final_pass = forward_embedded(x);
    return res;
  }

  // Inference-time decoding used by the pipeline: the entity-name phase is
  // greedy over {class names, none, SEG_1, EOS}; the mask-token scaffold
  // [SEG_1..SEG_N] is then appended in one block and a single full pass
  // yields E_O. Identical to constrained greedy decoding because the
  // scaffold tokens are forced either way.
  GenerationResult<T> generate_her(const TokenLayout<T>& layout) const {
    const Vocab& vocab = cfg_->vocab;
    ag::NoGradGuard no_grad;
    std::vector<int> allowed;
    for (int c : vocab.class_ids) allowed.push_back(c);
    allowed.push_back(vocab.none_id);
    allowed.push_back(vocab.seg_id(0));
    allowed.push_back(vocab.eos);

    GenerationResult<T> res;
    res.full_ids = layout.ids;
    Var<T> x = input_matrix(layout);
    int entity_budget = static_cast<int>(vocab.class_ids.size()) + 1;
    if (layout.length + entity_budget + vocab.n_seg + 1 > cfg_->context_len)
      throw std::invalid_argument("generate_her: sequence would exceed context limit");
    for (int step = 0; step < entity_budget; ++step) {
      LlmOutput<T> out = forward_embedded(x);
      int next = argmax_row(out.logits.val(), x.rows() - 1, &allowed);
      if (next == vocab.seg_id(0) || next == vocab.eos) break;
      res.generated.push_back(next);
      res.full_ids.push_back(next);
      x = append_token(x, next, x.rows());
    }
    for (int k = 0; k < vocab.n_seg; ++k) {
      res.generated.push_back(vocab.seg_id(k));
      res.full_ids.push_back(vocab.seg_id(k));
    }
    res.seg_count = vocab.n_seg;
    {
      std::vector<int> seg_ids(res.full_ids.end() - vocab.n_seg, res.full_ids.end());
      Var<T> seg_emb = token_embedding(seg_ids);
      std::vector<int> pos(static_cast<size_t>(vocab.n_seg));
      for (int i = 0; i < vocab.n_seg; ++i) pos[static_cast<size_t>(i)] = x.rows() + i;
      seg_emb = ag::add(seg_emb, ag::gather_rows(pos_emb_, pos));
      x = ag::concat_rows<T>({x, seg_emb});
    }
    res.final_pass = forward_embedded(x);
    return res;
  }

  const Var<T>& embedding_matrix() const { return embed_; }

 private:
  Var<T> append_token(const Var<T>& x, int id, int position) const {
    Var<T> row = token_embedding({id});
    row = ag::add(row, ag::gather_rows(pos_emb_, {position}));
    return ag::concat_rows<T>({x, row});
  }

  static int argmax_row(const Tensor<T>& logits, int row, const std::vector<int>* allowed) {
    int best = -1;
    T best_v = -std::numeric_limits<T>::infinity();
    if (allowed) {
      for (int j : *allowed)
        if (logits.at(row, j) > best_v) {
          best_v = logits.at(row, j);
          best = j;
        }
    } else {
      for (int j = 0; j < logits.cols(); ++j)
        if (logits.at(row, j) > best_v) {
          best_v = logits.at(row, j);
          best = j;
        }
    }
    return best;
  }

  const ModelConfig* cfg_ = nullptr;
  Var<T> embed_;
  Var<T> pos_emb_;
  std::vector<nn::LayerNorm<T>> ln1_, ln2_;
  std::vector<nn::MultiHeadAttention<T>> attn_;
  std::vector<nn::Mlp<T>> mlp_;
  nn::LayerNorm<T> ln_f_;
};

}  // namespace vlseg
