#pragma once

// Full model: vision towers -> FVP (with space-time injection on video) ->
// sequence assembly -> micro-VLLM -> HER extraction -> global prompt
// aggregation (video) -> segmentation predictor, plus the per-episode
// training losses with Hungarian matching. Frame-by-frame over videos.

#include "vlseg/config.hpp"
#include "vlseg/encoders.hpp"
#include "vlseg/fvp.hpp"
#include "vlseg/her.hpp"
#include "vlseg/losses.hpp"
#include "vlseg/predictor.hpp"
#include "vlseg/temporal.hpp"
#include "vlseg/vllm.hpp"

#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace vlseg {

template <typename T>
struct FrameOutput {
  PredictionSet<T> pred;
  her::HerExtract<T> extract;
  std::vector<int> generated;           // eval path only
  losses::MatchResult match;            // training path only
  std::vector<int> matched_identities;  // gt identity per match entry
};

template <typename T>
struct EpisodeOutput {
  std::vector<FrameOutput<T>> frames;
  losses::LossParts<T> parts;  // defined only when training
  Var<T> total;                // weighted sum (training)
  bool ins_warned = false;     // video episode produced no identity pairs
};

template <typename T>
class SegModel {
 public:
  explicit SegModel(const ModelConfig& cfg)
      : cfg_(&cfg), params_(splitmix64(static_cast<std::uint64_t>(cfg.seed) ^
                                       0x9e3779b97f4a7c15ULL)) {
    vanilla_ = VanillaEncoder<T>(params_, "vanilla", cfg);
    pyramid_ = PyramidEncoder<T>(params_, "pyramid", cfg);
    g_c_ = nn::Linear<T>(params_, "proj.g_c", cfg.vanilla_dim, cfg.embed_dim);
    fvp_ = Fvp<T>(params_, "fvp", cfg);
    injector_ = SpacetimeInjector<T>(params_, "temporal", cfg.embed_dim);
    llm_ = MicroVllm<T>(params_, "llm", cfg);
    predictor_ = Predictor<T>(params_, "predictor", cfg);
    if (cfg.freeze_towers) {
      params_.set_trainable_prefix("vanilla", false);
      params_.set_trainable_prefix("pyramid", false);
    }
    if (cfg.use_lora) {
      // LoRA regime: attention projection bases stay frozen, adapters train.
      for (int l = 0; l < cfg.llm_layers; ++l)
        for (const char* p : {"wq", "wk", "wv", "wo"}) {
          std::string base = "llm.layer" + std::to_string(l) + ".attn." + p + ".";
          params_.set_trainable_prefix(base + "weight", false);
          params_.set_trainable_prefix(base + "bias", false);
        }
    }
  }

  const ModelConfig& config() const { return *cfg_; }
  nn::ParamStore<T>& params() { return params_; }
  const nn::ParamStore<T>& params() const { return params_; }

  const VanillaEncoder<T>& vanilla() const { return vanilla_; }
  VanillaEncoder<T>& vanilla() { return vanilla_; }
  const PyramidEncoder<T>& pyramid() const { return pyramid_; }
  const Fvp<T>& fvp() const { return fvp_; }
  Fvp<T>& fvp() { return fvp_; }
  const MicroVllm<T>& llm() const { return llm_; }
  const Predictor<T>& predictor() const { return predictor_; }
  const SpacetimeInjector<T>& injector() const { return injector_; }
  const nn::Linear<T>& g_c() const { return g_c_; }

  EpisodeOutput<T> forward_episode(const EpisodeSample& sample, bool training) const {
    std::optional<ag::NoGradGuard> no_grad;
    if (!training) no_grad.emplace();

    const ModelConfig& cfg = *cfg_;
    const Vocab& vocab = cfg.vocab;
    bool video = is_video_task(sample.task);
    if (video && sample.num_frames() < 2)
      throw std::invalid_argument("forward_episode: video episode needs >= 2 frames");

    EpisodeOutput<T> out;
    TemporalState<T> state(cfg.temporal_window);

    std::vector<Var<T>> text_losses, cls_losses, mask_pair_losses, ins_losses;
    std::vector<int> prev_ids;   // matched gt identities of the previous frame
    std::vector<int> prev_rows;  // their proposal rows
    Var<T> prev_e;

    for (int t = 0; t < sample.num_frames(); ++t) {
      auto stage = [&](const char* name, auto&& fn) {
        try {
          return fn();
        } catch (const std::exception& e) {
          throw std::runtime_error("forward_episode[task=" + task_name(sample.task) +
                                   ", frame=" + std::to_string(t) + ", stage=" + name +
                                   "]: " + e.what());
        }
      };

      Var<T> frame = frame_tensor(sample.frames[static_cast<size_t>(t)]);
      FeatureGrid<T> f_v = stage("encode_vanilla", [&] { return vanilla_.forward(frame); });
      MultiScaleFeatures<T> scales =
          stage("encode_pyramid", [&] { return pyramid_.forward(frame); });
      Var<T> vision_tokens = g_c_.forward(f_v.feat);

      Var<T> fine;
      if (cfg.fvp_enabled) {
        Var<T> p_start = fvp_.init_tokens;
        if (video && cfg.temporal_local)
          p_start = stage("inject_spacetime", [&] { return injector_.inject(state, p_start); });
        fine = stage("fvp", [&] { return fvp_.run(p_start, scales); });
      }

      std::vector<Var<T>> region_embeds;
      if (sample.prompt.kind == PromptSpec::Kind::regions)
        stage("visual_prompt", [&] {
          for (const Region& r : sample.prompt.regions)
            region_embeds.push_back(
                g_c_.forward(sample_visual_prompt(f_v, r, cfg.image_size).embed));
          return 0;
        });

      std::vector<int> target;
      bool teacher = training || cfg.recognition == Recognition::decode_only;
      if (cfg.recognition == Recognition::decode_only)
        target = her::decode_only_input_block(vocab);
      else if (training)
        target = her::build_her_target(sample, t, vocab);

      TokenLayout<T> layout = stage("assemble", [&] {
        return assemble_sequence(vision_tokens, fine, sample.prompt, region_embeds, target,
                                 vocab, cfg);
      });

      FrameOutput<T> fo;
      Var<T> e_o;
      std::vector<int> full_ids;
      Var<T> llm_logits;
      if (teacher) {
        LlmOutput<T> lo = stage("llm_forward", [&] { return llm_.forward(layout); });
        e_o = lo.e_o;
        llm_logits = lo.logits;
        full_ids = layout.ids;
      } else {
        GenerationResult<T> gen = stage("llm_generate", [&] { return llm_.generate_her(layout); });
        e_o = gen.final_pass.e_o;
        full_ids = gen.full_ids;
        fo.generated = gen.generated;
      }

      fo.extract = stage("her_extract", [&] { return her::extract(layout, e_o, full_ids, vocab); });
      if (!fo.generated.empty())
        fo.extract.parsed = her::parse_generated_entities(fo.generated, vocab);

      // Global prompt aggregation (replace mode uses previous frames only).
      Var<T> e_p_use = fo.extract.e_p;
      if (video && cfg.temporal_global) {
        if (cfg.temporal_include_current) {
          push_prompt(state, fo.extract.e_p);
          e_p_use = stage("aggregate_prompts", [&] { return aggregate_prompts(state); });
        } else if (state.frame_index > 0) {
          e_p_use = stage("aggregate_prompts", [&] { return aggregate_prompts(state); });
        }
      }

      fo.pred = stage("predict", [&] { return predictor_.predict(e_p_use, fo.extract.e_q, scales); });

      if (training) {
        stage("losses", [&] {
          // Ground truth for this frame: objects visible now.
          std::vector<int> gt_obj;
          for (int i = 0; i < sample.num_objects(); ++i)
            if (!sample.gt_masks[static_cast<size_t>(t)][static_cast<size_t>(i)].empty())
              gt_obj.push_back(i);
          int npix = cfg.image_size * cfg.image_size;
          Tensor<T> gt_matrix({static_cast<int>(gt_obj.size()), npix});
          std::vector<int> gt_classes;
          for (size_t g = 0; g < gt_obj.size(); ++g) {
            const BinMask& m =
                sample.gt_masks[static_cast<size_t>(t)][static_cast<size_t>(gt_obj[g])];
            for (int pix = 0; pix < npix; ++pix)
              gt_matrix.at(static_cast<int>(g), pix) = static_cast<T>(m.v[static_cast<size_t>(pix)]);
            gt_classes.push_back(sample.gt_classes[static_cast<size_t>(gt_obj[g])]);
          }
          bool class_term = cfg.recognition != Recognition::generation_only;
          Tensor<double> cost =
              losses::matching_cost(fo.pred.logits.val(), fo.pred.masks.val(), fo.pred.z.val(),
                                    gt_matrix, gt_classes, cfg, class_term);
          fo.match = losses::hungarian_match(cost);
          for (size_t g = 0; g < gt_obj.size(); ++g) {
            Tensor<T> row({1, npix});
            std::copy_n(gt_matrix.data.data() + static_cast<size_t>(g) * npix, npix,
                        row.data.data());
            Var<T> lrow = ag::slice_rows(fo.pred.logits, fo.match.assignment[g], 1);
            mask_pair_losses.push_back(
                losses::mask_loss(lrow, row, cfg.lambda_bce, cfg.lambda_dice));
            fo.matched_identities.push_back(sample.gt_identities[static_cast<size_t>(gt_obj[g])]);
          }
          if (class_term)
            cls_losses.push_back(
                losses::class_ce(fo.pred.z, fo.match.assignment, gt_classes, cfg.noobj_weight));
          if (cfg.recognition != Recognition::decode_only)
            text_losses.push_back(losses::text_ce(llm_logits, layout.gen_start, target, vocab.pad));

          if (video && t > 0) {
            std::vector<std::pair<int, int>> pairs;
            for (size_t g = 0; g < fo.matched_identities.size(); ++g)
              for (size_t pg = 0; pg < prev_ids.size(); ++pg)
                if (prev_ids[pg] == fo.matched_identities[g])
                  pairs.push_back({prev_rows[pg],
                                   fo.match.assignment[g]});
            bool warned = false;
            ins_losses.push_back(losses::contrastive_symmetric(prev_e, fo.pred.e, pairs,
                                                               cfg.tau_ins, &warned));
            out.ins_warned = out.ins_warned || warned;
          }
          prev_ids = fo.matched_identities;
          prev_rows.clear();
          for (size_t g = 0; g < fo.match.assignment.size(); ++g)
            prev_rows.push_back(fo.match.assignment[g]);
          prev_e = fo.pred.e;
          return 0;
        });
      }

      if (video) {
        Var<T> fg_out;
        if (cfg.fvp_enabled) {
          if (const Span* span = layout.find_span(Role::finegrained)) {
            std::vector<int> pos(static_cast<size_t>(span->len));
            for (int i = 0; i < span->len; ++i) pos[static_cast<size_t>(i)] = span->start + i;
            fg_out = ag::gather_rows(e_o, pos);
          }
        }
        if (cfg.temporal_include_current && cfg.temporal_global) {
          set_prev_finegrained(state, fg_out);
          advance_frame(state);
        } else {
          update_state(state, fo.extract.e_p, fg_out);
        }
      }

      out.frames.push_back(std::move(fo));
    }

    if (training) {
      auto mean_of = [](std::vector<Var<T>>& parts) -> Var<T> {
        if (parts.empty()) return {};
        Var<T> acc = parts[0];
        for (size_t i = 1; i < parts.size(); ++i) acc = ag::add(acc, parts[i]);
        return ag::scalar_mul(acc, 1.0 / static_cast<double>(parts.size()));
      };
      out.parts.text = mean_of(text_losses);
      out.parts.mask = mean_of(mask_pair_losses);
      out.parts.cls = mean_of(cls_losses);
      out.parts.ins = mean_of(ins_losses);
      out.total = losses::total_loss(out.parts, cfg);
      if (!out.total.val().all_finite())
        throw std::runtime_error("forward_episode: non-finite loss");
    }
    return out;
  }

  static Var<T> frame_tensor(const TensorF& frame) {
    Tensor<T> t(frame.shape);
    for (std::int64_t i = 0; i < frame.size(); ++i)
      t.data[static_cast<size_t>(i)] = static_cast<T>(frame.data[static_cast<size_t>(i)]);
    return ag::constant(std::move(t));
  }

 private:
  const ModelConfig* cfg_;
  nn::ParamStore<T> params_;
  VanillaEncoder<T> vanilla_;
  PyramidEncoder<T> pyramid_;
  nn::Linear<T> g_c_;
  Fvp<T> fvp_;
  SpacetimeInjector<T> injector_;
  MicroVllm<T> llm_;
  Predictor<T> predictor_;
};

}  // namespace vlseg
