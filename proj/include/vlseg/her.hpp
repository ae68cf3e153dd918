#pragma once

// Hybrid entity recognition. The text target names the classes present (in
// canonical vocabulary order) followed by the mask-token scaffold
// [SEG_1..SEG_N] and EOS; empty scenes read "none". Extraction gathers E_Q
// from mask-token positions and E_P from the condition sub-offsets of E_O
// (a pure indexing operation). The generation-only and decode-only baselines
// differ only in where the mask tokens live and what supervises classes.

#include "vlseg/config.hpp"
#include "vlseg/data.hpp"
#include "vlseg/vllm.hpp"

#include <string>
#include <vector>

namespace vlseg::her {

// Token-id target for one frame: present entity names ++ mask tokens ++ EOS.
inline std::vector<int> build_her_target(const EpisodeSample& sample, int frame,
                                         const Vocab& vocab) {
  std::vector<int> present = sample.present_shape_classes(frame);
  std::vector<int> ids;
  if (present.empty()) {
    ids.push_back(vocab.none_id);
  } else {
    for (int c : present) {
      if (c < 0 || c >= static_cast<int>(vocab.class_ids.size()))
        throw std::invalid_argument("build_her_target: class index " + std::to_string(c) +
                                    " has no vocabulary token");
      ids.push_back(vocab.class_ids[static_cast<size_t>(c)]);
    }
  }
  for (int k = 0; k < vocab.n_seg; ++k) ids.push_back(vocab.seg_id(k));
  ids.push_back(vocab.eos);
  return ids;
}

// Decode-only places the mask tokens in the input sequence; there is no text
// target (and hence no text loss).
inline std::vector<int> decode_only_input_block(const Vocab& vocab) {
  std::vector<int> ids;
  for (int k = 0; k < vocab.n_seg; ++k) ids.push_back(vocab.seg_id(k));
  return ids;
}

struct ParsedEntities {
  std::vector<int> entities;     // shape-class indices, first-seen order, repeats collapsed
  std::vector<int> noise_ids;    // unknown tokens before the first mask token
};

// Strict parse of a generated sequence: class names before the first [SEG]
// become entities (set semantics); anything else is recorded as noise, never
// silently dropped.
inline ParsedEntities parse_generated_entities(const std::vector<int>& generated,
                                               const Vocab& vocab) {
  ParsedEntities out;
  for (int id : generated) {
    if (vocab.is_seg(id)) break;
    if (id == vocab.eos) break;
    bool is_class = false;
    for (size_t c = 0; c < vocab.class_ids.size(); ++c)
      if (vocab.class_ids[c] == id) {
        int ci = static_cast<int>(c);
        if (std::find(out.entities.begin(), out.entities.end(), ci) == out.entities.end())
          out.entities.push_back(ci);
        is_class = true;
        break;
      }
    if (!is_class && id != vocab.none_id) out.noise_ids.push_back(id);
  }
  return out;
}

template <typename T>
struct HerExtract {
  Var<T> e_q;  // N x D_model, rows 1:1 with mask tokens in generation order
  Var<T> e_p;  // K x D_model, rows 1:1 with condition entries
  std::vector<int> seg_positions;
  ParsedEntities parsed;  // empty for teacher-forced / decode-only extraction
};

// `full_ids` and `e_o` describe the same sequence; mask-token positions are
// looked up at or after gen_start. For a multi-token referring sentence the
// prompt embedding is the mean over its positions (K = 1).
template <typename T>
HerExtract<T> extract(const TokenLayout<T>& layout, const Var<T>& e_o,
                      const std::vector<int>& full_ids, const Vocab& vocab) {
  if (static_cast<int>(full_ids.size()) != e_o.rows())
    throw std::invalid_argument("her extract: ids/EO length mismatch");
  HerExtract<T> out;
  for (int pos = layout.gen_start; pos < static_cast<int>(full_ids.size()); ++pos)
    if (vocab.is_seg(full_ids[static_cast<size_t>(pos)])) out.seg_positions.push_back(pos);
  if (static_cast<int>(out.seg_positions.size()) < vocab.n_seg)
    throw std::runtime_error("her extract: found " + std::to_string(out.seg_positions.size()) +
                             " mask tokens, need " + std::to_string(vocab.n_seg));
  out.seg_positions.resize(static_cast<size_t>(vocab.n_seg));
  out.e_q = ag::gather_rows(e_o, out.seg_positions);

  std::vector<Var<T>> prompt_rows;
  for (const auto& [start, len] : layout.condition_groups) {
    std::vector<int> pos(static_cast<size_t>(len));
    for (int i = 0; i < len; ++i) pos[static_cast<size_t>(i)] = start + i;
    Var<T> rows = ag::gather_rows(e_o, pos);
    prompt_rows.push_back(len == 1 ? rows : ag::mean_rows(rows));
  }
  out.e_p = ag::concat_rows(prompt_rows);
  return out;
}

}  // namespace vlseg::her
