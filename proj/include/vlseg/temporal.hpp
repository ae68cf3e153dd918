#pragma once

// Temporal adapter for frame-by-frame video processing. Global prompt
// aggregation pools the per-frame prompt embeddings over a window of T frames
// (adaptive average pooling to length one == arithmetic mean); local
// space-time injection re-projects the previous frame's LLM outputs at the
// fine-grained positions into the next frame's starting tokens.

#include "vlseg/nn.hpp"

#include <deque>
#include <stdexcept>
#include <string>

namespace vlseg {

using ag::Var;

// Per-video state; oldest entry first, capacity T.
template <typename T>
struct TemporalState {
  int capacity = 0;
  std::deque<Var<T>> prompt_history;    // per-frame E_P, K x D_model
  Var<T> prev_finegrained_out;          // undefined before the first frame
  int frame_index = 0;

  explicit TemporalState(int window = 1) : capacity(window) {
    if (window <= 0) throw std::invalid_argument("temporal window must be positive");
  }

  void reset() {
    prompt_history.clear();
    prev_finegrained_out = {};
    frame_index = 0;
  }
};

// Eq-style mean over the stored history (length <= T).
template <typename T>
Var<T> aggregate_prompts(const TemporalState<T>& state) {
  if (state.prompt_history.empty())
    throw std::invalid_argument("aggregate_prompts: empty prompt history");
  Var<T> acc = state.prompt_history.front();
  for (size_t i = 1; i < state.prompt_history.size(); ++i)
    acc = ag::add(acc, state.prompt_history[i]);
  return ag::scalar_mul(acc, 1.0 / static_cast<double>(state.prompt_history.size()));
}

// Space-time injection: frame 0 starts from the learned tokens; later frames
// start from G_l applied to the previous frame's fine-grained outputs.
template <typename T>
struct SpacetimeInjector {
  nn::Linear<T> g_l;  // D_model -> D_model

  SpacetimeInjector() = default;
  SpacetimeInjector(nn::ParamStore<T>& ps, const std::string& name, int embed_dim)
      : g_l(ps, name + ".g_l", embed_dim, embed_dim) {}

  Var<T> inject(const TemporalState<T>& state, const Var<T>& init_tokens) const {
    if (state.frame_index == 0 || !state.prev_finegrained_out.defined()) return init_tokens;
    return g_l.forward(state.prev_finegrained_out);
  }
};

// FIFO push with eviction beyond the window.
template <typename T>
void push_prompt(TemporalState<T>& state, Var<T> e_p_frame) {
  state.prompt_history.push_back(std::move(e_p_frame));
  while (static_cast<int>(state.prompt_history.size()) > state.capacity)
    state.prompt_history.pop_front();
}

template <typename T>
void set_prev_finegrained(TemporalState<T>& state, Var<T> finegrained_out) {
  state.prev_finegrained_out = std::move(finegrained_out);
}

template <typename T>
void advance_frame(TemporalState<T>& state) {
  ++state.frame_index;
}

template <typename T>
void update_state(TemporalState<T>& state, Var<T> e_p_frame, Var<T> finegrained_out) {
  push_prompt(state, std::move(e_p_frame));
  set_prev_finegrained(state, std::move(finegrained_out));
  advance_frame(state);
}

}  // namespace vlseg
