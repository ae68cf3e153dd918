#include "vlseg/her.hpp"
#include "vlseg/vllm.hpp"

#include "helpers.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace vlseg;
using testutil::grad_check;
using testutil::random_tensor;

namespace {

ModelConfig micro_cfg(int n_seg = 4) {
  ModelConfig c;
  c.image_size = 32;
  c.patch_size = 8;
  c.embed_dim = 8;
  c.llm_layers = 2;
  c.llm_heads = 2;
  c.vanilla_dim = 8;
  c.vanilla_heads = 2;
  c.fvp_heads = 2;
  c.num_fvp_tokens = 2;
  c.num_fvp_layers = 2;
  c.pyramid_base_channels = 4;
  c.predictor_dim = 8;
  c.predictor_heads = 2;
  c.num_mask_tokens = n_seg;
  c.max_objects = 2;
  c.context_len = 128;
  return validate_config(c);
}

template <typename T>
Var<T> rand_rows(Rng& rng, int rows, int cols) {
  Tensor<T> t({rows, cols});
  for (auto& v : t.data) v = static_cast<T>(rng.normal(0, 0.5));
  return ag::constant(std::move(t));
}

PromptSpec class_prompt() {
  PromptSpec p;
  p.kind = PromptSpec::Kind::classes;
  p.instruction = "segment all objects by class";
  p.class_names = class_names();
  return p;
}

}  // namespace

TEST_CASE("assemble_sequence lays out spans with exact bookkeeping") {
  ModelConfig cfg = micro_cfg();
  Rng rng(1);
  auto vision = rand_rows<float>(rng, 16, cfg.embed_dim);
  auto fine = rand_rows<float>(rng, 16, cfg.embed_dim);

  SECTION("class prompt: 16 vision + 16 fine + 5 instruction + 3 condition + BOS") {
    auto layout = assemble_sequence<float>(vision, fine, class_prompt(), {}, {}, cfg.vocab, cfg);
    CHECK(layout.length == 1 + 16 + 16 + 5 + 3);
    REQUIRE(layout.condition_groups.size() == 3);
    const Span* cond = layout.find_span(Role::condition);
    REQUIRE(cond != nullptr);
    CHECK(cond->len == 3);
    // Spans are contiguous, non-overlapping, and cover the sequence.
    int at = 0;
    for (const auto& s : layout.spans) {
      CHECK(s.start == at);
      at += s.len;
    }
    CHECK(at == layout.length);
    CHECK(layout.gen_start == layout.length);
  }
  SECTION("sentence prompt records one group spanning all its tokens") {
    PromptSpec p;
    p.kind = PromptSpec::Kind::sentence;
    p.instruction = "segment by expression";
    p.sentence = "the red circle";
    auto layout = assemble_sequence<float>(vision, fine, p, {}, {}, cfg.vocab, cfg);
    REQUIRE(layout.condition_groups.size() == 1);
    CHECK(layout.condition_groups[0].second == 3);
  }
  SECTION("visual prompt with two regions injects two condition rows") {
    PromptSpec p;
    p.kind = PromptSpec::Kind::regions;
    p.instruction = "segment given regions";
    p.regions.resize(2);
    std::vector<Var<float>> embeds = {rand_rows<float>(rng, 1, cfg.embed_dim),
                                      rand_rows<float>(rng, 1, cfg.embed_dim)};
    auto layout = assemble_sequence<float>(vision, fine, p, embeds, {}, cfg.vocab, cfg);
    REQUIRE(layout.condition_groups.size() == 2);
    const Span* cond = layout.find_span(Role::condition);
    CHECK(cond->len == 2);
    CHECK(layout.ids[static_cast<size_t>(cond->start)] == cfg.vocab.vref);
  }
  SECTION("out-of-vocabulary tokens and overlong sequences are rejected") {
    PromptSpec p;
    p.kind = PromptSpec::Kind::sentence;
    p.instruction = "segment by expression";
    p.sentence = "the purple dinosaur";
    CHECK_THROWS_WITH(assemble_sequence<float>(vision, fine, p, {}, {}, cfg.vocab, cfg),
                      Catch::Matchers::ContainsSubstring("purple"));

    std::vector<int> huge(static_cast<size_t>(cfg.context_len), cfg.vocab.none_id);
    CHECK_THROWS_WITH(
        assemble_sequence<float>(vision, fine, class_prompt(), {}, huge, cfg.vocab, cfg),
        Catch::Matchers::ContainsSubstring("context limit"));
  }
}

TEST_CASE("causal mask: perturbing the last position leaves earlier outputs unchanged") {
  ModelConfig cfg = micro_cfg();
  nn::ParamStore<float> ps(2);
  MicroVllm<float> llm(ps, "llm", cfg);
  Rng rng(3);
  auto vision = rand_rows<float>(rng, 4, cfg.embed_dim);
  auto fine = rand_rows<float>(rng, 2, cfg.embed_dim);
  auto layout = assemble_sequence<float>(vision, fine, class_prompt(), {},
                                         {cfg.vocab.none_id, cfg.vocab.eos}, cfg.vocab, cfg);
  auto out1 = llm.forward(layout);

  // Same layout with the last target token changed.
  auto layout2 = assemble_sequence<float>(vision, fine, class_prompt(), {},
                                          {cfg.vocab.none_id, cfg.vocab.seg_id(0)}, cfg.vocab,
                                          cfg);
  auto out2 = llm.forward(layout2);
  int last = layout.length - 1;
  for (int i = 0; i < last; ++i)
    for (int j = 0; j < cfg.embed_dim; ++j)
      CHECK(out1.e_o.val().at(i, j) == out2.e_o.val().at(i, j));
  bool any_diff = false;
  for (int j = 0; j < cfg.embed_dim; ++j)
    any_diff = any_diff || out1.e_o.val().at(last, j) != out2.e_o.val().at(last, j);
  CHECK(any_diff);
}

TEST_CASE("llm gradients match central differences on a 2-layer 8-dim instance") {
  ModelConfig cfg = micro_cfg();
  nn::ParamStore<double> ps(4);
  MicroVllm<double> llm(ps, "llm", cfg);
  Rng rng(5);
  auto vision = rand_rows<double>(rng, 3, cfg.embed_dim);
  auto fine = rand_rows<double>(rng, 2, cfg.embed_dim);
  std::vector<int> target = {cfg.vocab.class_ids[0], cfg.vocab.seg_id(0), cfg.vocab.eos};
  auto layout =
      assemble_sequence<double>(vision, fine, class_prompt(), {}, target, cfg.vocab, cfg);

  std::vector<Var<double>> params;
  for (size_t i = 0; i < ps.size(); ++i) params.push_back(ps.entry(i).var);
  auto f = [&] {
    auto out = llm.forward(layout);
    std::vector<int> targets(static_cast<size_t>(out.logits.rows()), 0);
    std::vector<double> weights(static_cast<size_t>(out.logits.rows()), 0.0);
    for (size_t k = 0; k < target.size(); ++k) {
      targets[static_cast<size_t>(layout.gen_start) - 1 + k] = target[k];
      weights[static_cast<size_t>(layout.gen_start) - 1 + k] = 1.0;
    }
    return ag::cross_entropy_rows(out.logits, targets, weights);
  };
  auto res = grad_check(f, params, 1e-5, 10);
  INFO(res.worst);
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("adapters with zero B leave the model bit-exact; nonzero B changes it") {
  ModelConfig cfg = micro_cfg();
  nn::ParamStore<float> ps_base(6);
  MicroVllm<float> base(ps_base, "llm", cfg);

  ModelConfig cfg_lora = cfg;
  cfg_lora.use_lora = true;
  cfg_lora = validate_config(cfg_lora);
  nn::ParamStore<float> ps_lora(6);  // same init seed: base weights identical until
  MicroVllm<float> lora(ps_lora, "llm", cfg_lora);

  // LoRA registers extra params between layers, shifting later inits; copy
  // base weights over by name to compare apples to apples.
  for (size_t i = 0; i < ps_lora.size(); ++i) {
    auto& e = ps_lora.entry(i);
    if (auto* src = ps_base.find(e.name)) e.var.node()->value = src->val();
  }
  // Zero every lora_b again (find() copies cannot have touched them).
  Rng rng(7);
  auto vision = rand_rows<float>(rng, 4, cfg.embed_dim);
  auto fine = rand_rows<float>(rng, 2, cfg.embed_dim);
  auto layout = assemble_sequence<float>(vision, fine, class_prompt(), {},
                                         {cfg.vocab.eos}, cfg.vocab, cfg);
  auto out_base = base.forward(layout);
  auto out_lora = lora.forward(layout);
  CHECK(bitwise_equal(out_base.e_o.val(), out_lora.e_o.val()));

  for (size_t i = 0; i < ps_lora.size(); ++i)
    if (ps_lora.entry(i).name.find("lora_b") != std::string::npos)
      for (auto& v : ps_lora.entry(i).var.node()->value.data) v = 0.05f;
  auto out_lora2 = lora.forward(layout);
  CHECK_FALSE(bitwise_equal(out_base.e_o.val(), out_lora2.e_o.val()));
}

TEST_CASE("greedy generation is deterministic and reports mask-token deficits") {
  ModelConfig cfg = micro_cfg(4);
  nn::ParamStore<float> ps(8);
  MicroVllm<float> llm(ps, "llm", cfg);
  Rng rng(9);
  auto vision = rand_rows<float>(rng, 4, cfg.embed_dim);
  auto fine = rand_rows<float>(rng, 2, cfg.embed_dim);
  auto layout = assemble_sequence<float>(vision, fine, class_prompt(), {}, {}, cfg.vocab, cfg);

  // max_len 1 with 4 mask tokens required -> deficit error.
  CHECK_THROWS_WITH(llm.generate(layout, 1),
                    Catch::Matchers::ContainsSubstring("deficit"));

  // Determinism: same layout, same params -> same outcome, whether that is a
  // completed generation or the same deficit error.
  auto run = [&]() -> std::string {
    try {
      auto g = llm.generate(layout, 40);
      return "ok:" + cfg.vocab.decode(g.generated);
    } catch (const std::exception& e) {
      return std::string("err:") + e.what();
    }
  };
  CHECK(run() == run());

  // Context accounting is enforced rather than silently truncated.
  CHECK_THROWS_WITH(llm.generate(layout, cfg.context_len),
                    Catch::Matchers::ContainsSubstring("context limit"));
}

TEST_CASE("an overfit model reproduces the teacher sequence greedily") {
  ModelConfig cfg = micro_cfg(3);
  cfg.embed_dim = 16;
  cfg.llm_layers = 2;
  cfg.llm_heads = 2;
  cfg = validate_config(cfg);
  nn::ParamStore<float> ps(10);
  MicroVllm<float> llm(ps, "llm", cfg);
  Rng rng(11);
  auto vision = rand_rows<float>(rng, 4, cfg.embed_dim);
  std::vector<int> teacher = her::build_her_target(
      [] {
        EpisodeSample s;
        s.task = TaskTag::panoptic;
        s.gt_shape_classes = {0, 2};
        s.gt_classes = {0, 2};
        s.gt_identities = {0, 1};
        s.gt_masks.resize(1);
        s.gt_masks[0].resize(2, BinMask(4, 4));
        s.gt_masks[0][0].at(0, 0) = 1;
        s.gt_masks[0][1].at(1, 1) = 1;
        return s;
      }(),
      0, cfg.vocab);

  auto teacher_layout =
      assemble_sequence<float>(vision, {}, class_prompt(), {}, teacher, cfg.vocab, cfg);
  // A few hundred full-batch steps on one sample memorize it.
  std::vector<size_t> trainable;
  for (size_t i = 0; i < ps.size(); ++i) trainable.push_back(i);
  for (int step = 0; step < 300; ++step) {
    ps.zero_grad();
    auto out = llm.forward(teacher_layout);
    std::vector<int> targets(static_cast<size_t>(out.logits.rows()), 0);
    std::vector<double> weights(static_cast<size_t>(out.logits.rows()), 0.0);
    for (size_t k = 0; k < teacher.size(); ++k) {
      targets[static_cast<size_t>(teacher_layout.gen_start) - 1 + k] = teacher[k];
      weights[static_cast<size_t>(teacher_layout.gen_start) - 1 + k] = 1.0;
    }
    auto loss = ag::cross_entropy_rows(out.logits, targets, weights);
    ag::backward(loss);
    for (size_t i : trainable) {
      auto& e = ps.entry(i);
      auto& v = e.var.node()->value;
      auto& g = e.var.grad();
      for (size_t k = 0; k < v.data.size(); ++k) v.data[k] -= 0.05f * g.data[k];
    }
  }
  auto gen_layout = assemble_sequence<float>(vision, {}, class_prompt(), {}, {}, cfg.vocab, cfg);
  auto gen = llm.generate(gen_layout, static_cast<int>(teacher.size()) + 4);
  // Greedy decoding stops at the N-th mask token, so the teacher's trailing
  // EOS is never emitted; everything before it must match exactly.
  std::vector<int> teacher_prefix(teacher.begin(), teacher.end() - 1);
  CHECK(gen.generated == teacher_prefix);
}

TEST_CASE("staged HER generation matches constrained greedy decoding") {
  ModelConfig cfg = micro_cfg(3);
  nn::ParamStore<float> ps(12);
  MicroVllm<float> llm(ps, "llm", cfg);
  Rng rng(13);
  auto vision = rand_rows<float>(rng, 4, cfg.embed_dim);
  auto layout = assemble_sequence<float>(vision, {}, class_prompt(), {}, {}, cfg.vocab, cfg);
  auto staged = llm.generate_her(layout);
  CHECK(staged.seg_count == cfg.vocab.n_seg);
  // Entity prefix tokens are class names or none only.
  for (int id : staged.generated) {
    if (cfg.vocab.is_seg(id)) break;
    bool ok = id == cfg.vocab.none_id;
    for (int c : cfg.vocab.class_ids) ok = ok || id == c;
    CHECK(ok);
  }
  // The final pass covers the full sequence.
  CHECK(staged.final_pass.e_o.rows() == static_cast<int>(staged.full_ids.size()));
}
