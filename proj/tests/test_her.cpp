#include "vlseg/her.hpp"

#include "helpers.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace vlseg;
using testutil::random_tensor;

namespace {

ModelConfig cfg_n(int n_seg) {
  ModelConfig c;
  c.image_size = 32;
  c.patch_size = 8;
  c.embed_dim = 8;
  c.llm_layers = 1;
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
  return validate_config(c);
}

EpisodeSample sample_with_classes(std::vector<int> classes) {
  EpisodeSample s;
  s.task = TaskTag::panoptic;
  s.gt_shape_classes = classes;
  s.gt_classes = classes;
  for (size_t i = 0; i < classes.size(); ++i) s.gt_identities.push_back(static_cast<int>(i));
  s.gt_masks.resize(1);
  for (size_t i = 0; i < classes.size(); ++i) {
    BinMask m(4, 4);
    m.at(static_cast<int>(i) % 4, static_cast<int>(i) % 4) = 1;
    s.gt_masks[0].push_back(m);
  }
  return s;
}

}  // namespace

TEST_CASE("target = present class names in canonical order ++ mask tokens ++ EOS") {
  ModelConfig cfg = cfg_n(4);
  const Vocab& v = cfg.vocab;

  SECTION("scene {circle, square}") {
    auto ids = her::build_her_target(sample_with_classes({1, 0}), 0, v);
    std::vector<int> expect = {v.class_ids[0], v.class_ids[1]};
    for (int k = 0; k < 4; ++k) expect.push_back(v.seg_id(k));
    expect.push_back(v.eos);
    CHECK(ids == expect);
    CHECK(v.decode(ids) ==
          "circle square [SEG_1] [SEG_2] [SEG_3] [SEG_4] [EOS]");
  }
  SECTION("empty scene reads none") {
    auto ids = her::build_her_target(sample_with_classes({}), 0, v);
    CHECK(ids.front() == v.none_id);
    CHECK(static_cast<int>(ids.size()) == 1 + 4 + 1);
  }
  SECTION("duplicate classes collapse to one name") {
    auto ids = her::build_her_target(sample_with_classes({0, 0}), 0, v);
    CHECK(static_cast<int>(ids.size()) == 1 + 4 + 1);
    CHECK(ids.front() == v.class_ids[0]);
  }
  SECTION("objects invisible in the frame are not named") {
    EpisodeSample s = sample_with_classes({0, 2});
    s.gt_masks[0][1] = BinMask(4, 4);  // second object occluded away
    auto ids = her::build_her_target(s, 0, v);
    CHECK(ids.front() == v.class_ids[0]);
    CHECK(static_cast<int>(ids.size()) == 1 + 4 + 1);
  }
  SECTION("class index outside the vocabulary is an error") {
    CHECK_THROWS_WITH(her::build_her_target(sample_with_classes({7}), 0, v),
                      Catch::Matchers::ContainsSubstring("vocabulary"));
  }
}

TEST_CASE("extraction gathers E_Q and E_P positions exactly") {
  ModelConfig cfg = cfg_n(3);
  const Vocab& v = cfg.vocab;
  Rng rng(1);

  // Layout: BOS + 2 vision + instruction(5) + 3 class conditions + 3 SEG in
  // the generated span.
  Tensor<float> vis_f({2, 8});
  for (std::int64_t i = 0; i < vis_f.size(); ++i)
    vis_f.data[static_cast<size_t>(i)] = static_cast<float>(rng.normal());
  PromptSpec prompt;
  prompt.kind = PromptSpec::Kind::classes;
  prompt.instruction = "segment all objects by class";
  prompt.class_names = class_names();
  std::vector<int> target = {v.class_ids[1], v.seg_id(0), v.seg_id(1), v.seg_id(2), v.eos};
  auto layout = assemble_sequence<float>(ag::constant(vis_f), {}, prompt, {}, target, v, cfg);

  // Sentinel E_O: row i filled with value i.
  TensorF e_o({layout.length, cfg.embed_dim});
  for (int i = 0; i < layout.length; ++i)
    for (int j = 0; j < cfg.embed_dim; ++j) e_o.at(i, j) = static_cast<float>(i);
  auto ext = her::extract(layout, ag::constant(e_o), layout.ids, v);

  CHECK(ext.e_q.rows() == 3);
  CHECK(ext.e_p.rows() == 3);
  // Mask-token rows point at the SEG positions (gen_start + 1 onward).
  for (int k = 0; k < 3; ++k)
    CHECK(ext.e_q.val().at(k, 0) == static_cast<float>(layout.gen_start + 1 + k));
  // Prompt rows point at the condition positions.
  const Span* cond = layout.find_span(Role::condition);
  for (int k = 0; k < 3; ++k)
    CHECK(ext.e_p.val().at(k, 0) == static_cast<float>(cond->start + k));
  // Extraction is pure indexing: E_O is untouched.
  for (int i = 0; i < layout.length; ++i) CHECK(e_o.at(i, 0) == static_cast<float>(i));
}

TEST_CASE("multi-token referring sentences pool to one prompt row (mean)") {
  ModelConfig cfg = cfg_n(3);
  const Vocab& v = cfg.vocab;
  Rng rng(2);
  Tensor<float> vis({2, 8});
  PromptSpec prompt;
  prompt.kind = PromptSpec::Kind::sentence;
  prompt.instruction = "segment by expression";
  prompt.sentence = "the red circle that can roll";  // 6 tokens
  std::vector<int> target = {v.seg_id(0), v.seg_id(1), v.seg_id(2), v.eos};
  auto layout = assemble_sequence<float>(ag::constant(vis), {}, prompt, {}, target, v, cfg);

  TensorF e_o({layout.length, cfg.embed_dim});
  for (int i = 0; i < layout.length; ++i)
    for (int j = 0; j < cfg.embed_dim; ++j) e_o.at(i, j) = static_cast<float>(i);
  auto ext = her::extract(layout, ag::constant(e_o), layout.ids, v);
  REQUIRE(ext.e_p.rows() == 1);
  const Span* cond = layout.find_span(Role::condition);
  double expected = cond->start + (cond->len - 1) / 2.0;
  CHECK(ext.e_p.val().at(0, 0) == Catch::Approx(expected));
}

TEST_CASE("fewer than N mask tokens is an extraction error") {
  ModelConfig cfg = cfg_n(4);
  const Vocab& v = cfg.vocab;
  Tensor<float> vis({2, 8});
  PromptSpec prompt;
  prompt.kind = PromptSpec::Kind::classes;
  prompt.instruction = "segment all objects by class";
  prompt.class_names = class_names();
  std::vector<int> target = {v.seg_id(0), v.seg_id(1), v.eos};  // only 2 of 4
  auto layout = assemble_sequence<float>(ag::constant(vis), {}, prompt, {}, target, v, cfg);
  TensorF e_o({layout.length, cfg.embed_dim});
  CHECK_THROWS_WITH(her::extract(layout, ag::constant(e_o), layout.ids, v),
                    Catch::Matchers::ContainsSubstring("mask tokens"));
}

TEST_CASE("strict parsing collapses repeats and records noise") {
  ModelConfig cfg = cfg_n(2);
  const Vocab& v = cfg.vocab;
  std::vector<int> gen = {v.class_ids[2], v.class_ids[2], v.id("red"), v.class_ids[0],
                          v.seg_id(0),    v.class_ids[1]};
  auto parsed = her::parse_generated_entities(gen, v);
  CHECK(parsed.entities == std::vector<int>{2, 0});  // repeats collapse, order kept
  CHECK(parsed.noise_ids == std::vector<int>{v.id("red")});  // reported, not dropped
}

TEST_CASE("decode-only input block is the mask-token scaffold with no text target") {
  ModelConfig cfg = cfg_n(3);
  auto block = her::decode_only_input_block(cfg.vocab);
  REQUIRE(static_cast<int>(block.size()) == 3);
  for (int k = 0; k < 3; ++k) CHECK(block[static_cast<size_t>(k)] == cfg.vocab.seg_id(k));
}

TEST_CASE("argmax class predictions ignore common positive rescaling of E_Q and E_P") {
  // Downstream scores are bilinear in (E_Q, E_P); scaling both by s > 0
  // scales all logits by s^2 and cannot change the argmax.
  Rng rng(3);
  auto randf = [&](std::vector<int> shape) {
    Tensor<float> t(std::move(shape));
    for (auto& x : t.data) x = static_cast<float>(rng.normal());
    return t;
  };
  Tensor<float> q = randf({4, 8}), p = randf({3, 8});
  Tensor<float> z({4, 3});
  z.mat().noalias() = q.mat() * p.mat().transpose();
  for (double s : {0.5, 3.0}) {
    Tensor<float> q2 = q, p2 = p;
    for (auto& x : q2.data) x = static_cast<float>(x * s);
    for (auto& x : p2.data) x = static_cast<float>(x * s);
    Tensor<float> z2({4, 3});
    z2.mat().noalias() = q2.mat() * p2.mat().transpose();
    for (int i = 0; i < 4; ++i) {
      int a1 = 0, a2 = 0;
      for (int j = 1; j < 3; ++j) {
        if (z.at(i, j) > z.at(i, a1)) a1 = j;
        if (z2.at(i, j) > z2.at(i, a2)) a2 = j;
      }
      CHECK(a1 == a2);
    }
  }
}
