#include "vlseg/encoders.hpp"
#include "vlseg/model.hpp"
#include "vlseg/synthdata.hpp"

#include "helpers.hpp"

#include <catch2/catch_amalgamated.hpp>

using namespace vlseg;
using testutil::grad_check;

namespace {

ModelConfig tiny_cfg() {
  ModelConfig c;
  c.image_size = 32;
  c.patch_size = 8;
  c.vanilla_dim = 16;
  c.vanilla_layers = 1;
  c.vanilla_heads = 2;
  c.pyramid_base_channels = 4;
  c.num_fvp_layers = 2;
  c.embed_dim = 16;
  c.num_fvp_tokens = 4;
  c.predictor_dim = 8;
  c.predictor_heads = 2;
  c.llm_layers = 1;
  c.llm_heads = 2;
  c.num_mask_tokens = 4;
  c.max_objects = 2;
  return validate_config(c);
}

template <typename T>
Var<T> image_var(const TensorF& img) {
  Tensor<T> t(img.shape);
  for (std::int64_t i = 0; i < img.size(); ++i)
    t.data[static_cast<size_t>(i)] = static_cast<T>(img.data[static_cast<size_t>(i)]);
  return ag::constant(std::move(t));
}

}  // namespace

TEST_CASE("vanilla encoder is deterministic and finite on degenerate input") {
  ModelConfig cfg = tiny_cfg();
  nn::ParamStore<float> ps(3);
  VanillaEncoder<float> enc(ps, "v", cfg);
  Var<float> zero = ag::constant(TensorF::zeros({cfg.image_size * cfg.image_size, 3}));
  auto g1 = enc.forward(zero);
  auto g2 = enc.forward(zero);
  CHECK(g1.feat.val().all_finite());
  CHECK(bitwise_equal(g1.feat.val(), g2.feat.val()));
  CHECK(g1.h * g1.w == cfg.vision_tokens());
  CHECK(g1.feat.cols() == cfg.vanilla_dim);
}

TEST_CASE("translation by one patch permutes the dominant-activation cell") {
  ModelConfig cfg = tiny_cfg();
  nn::ParamStore<float> ps(4);
  VanillaEncoder<float> enc(ps, "v", cfg);
  enc.use_pos_emb = false;  // equivariance only holds without position embeddings

  // Single bright square, then the same square one patch to the right.
  synth::SceneSpec scene;
  scene.image_size = cfg.image_size;
  scene.objects.push_back({synth::Shape::square, 0, 11.0, 11.0, 4.0, 0, 0});
  auto f0 = synth::render_frame(scene, 0);
  scene.objects[0].cx += cfg.patch_size;
  auto f1 = synth::render_frame(scene, 0);

  auto dominant = [&](const FeatureGrid<float>& g) {
    int best = 0;
    double best_n = -1;
    for (int i = 0; i < g.feat.rows(); ++i) {
      double n = 0;
      for (int j = 0; j < g.feat.cols(); ++j) n += std::abs(g.feat.val().at(i, j));
      if (n > best_n) {
        best_n = n;
        best = i;
      }
    }
    return best;
  };
  // Deviation from the background response localizes the object.
  auto delta_grid = [&](const TensorF& img) {
    auto g = enc.forward(image_var<float>(img));
    auto bg = enc.forward(image_var<float>(synth::render_frame({{}, 1, cfg.image_size}, 0).image));
    FeatureGrid<float> d = g;
    d.feat = ag::sub(g.feat, bg.feat);
    return d;
  };
  int c0 = dominant(delta_grid(f0.image));
  int c1 = dominant(delta_grid(f1.image));
  CHECK(c1 == c0 + 1);  // moved exactly one cell to the right
}

TEST_CASE("pyramid produces J strictly coarser scales; constant image stays constant") {
  ModelConfig cfg = validate_config({});
  nn::ParamStore<float> ps(5);
  PyramidEncoder<float> enc(ps, "p", cfg);
  Var<float> img = ag::constant(TensorF::full({cfg.image_size * cfg.image_size, 3}, 0.37f));
  auto ms = enc.forward(img);
  REQUIRE(static_cast<int>(ms.scales.size()) == cfg.num_fvp_layers);
  CHECK(ms.scales[0].h == 16);
  CHECK(ms.scales[1].h == 8);
  CHECK(ms.scales[2].h == 4);
  for (size_t j = 1; j < ms.scales.size(); ++j)
    CHECK(ms.scales[j].h < ms.scales[j - 1].h);
  for (const auto& s : ms.scales)
    for (int i = 0; i < s.feat.rows(); ++i)
      for (int j = 0; j < s.feat.cols(); ++j)
        CHECK(s.feat.val().at(i, j) == Catch::Approx(s.feat.val().at(0, j)).margin(1e-7));
}

TEST_CASE("pyramid rejects indivisible image sizes") {
  ModelConfig cfg = tiny_cfg();
  nn::ParamStore<float> ps(6);
  PyramidEncoder<float> enc(ps, "p", cfg);
  Var<float> bad = ag::constant(TensorF::zeros({24 * 24, 3}));
  CHECK_THROWS(enc.forward(bad));
}

TEST_CASE("pyramid conv weights pass central-difference gradient check") {
  ModelConfig cfg = tiny_cfg();
  nn::ParamStore<double> ps(7);
  PyramidEncoder<double> enc(ps, "p", cfg);
  Rng rng(8);
  Tensor<double> img({cfg.image_size * cfg.image_size, 3});
  for (auto& v : img.data) v = rng.uniform();
  Var<double> x = ag::constant(img);

  std::vector<ag::Var<double>> params;
  for (size_t i = 0; i < ps.size(); ++i) params.push_back(ps.entry(i).var);
  auto f = [&] {
    auto ms = enc.forward(x);
    Var<double> sum = ag::constant(Tensor<double>::scalar(0));
    for (auto& s : ms.scales) sum = ag::add(sum, ag::mean_all(ag::mul(s.feat, s.feat)));
    return sum;
  };
  auto res = grad_check(f, params, 1e-5, 24);
  INFO(res.worst);
  CHECK(res.max_rel_err < 1e-4);
}

TEST_CASE("projections are affine with the contracted shapes") {
  nn::ParamStore<float> ps(9);
  nn::Linear<float> proj(ps, "g", 4, 4);
  // Identity-initialized square projection returns its input.
  auto& w = proj.weight.node()->value;
  for (int i = 0; i < 4; ++i)
    for (int j = 0; j < 4; ++j) w.at(i, j) = i == j ? 1.0f : 0.0f;
  Rng rng(1);
  TensorF x({3, 4});
  for (auto& v : x.data) v = static_cast<float>(rng.normal());
  auto y = proj.forward(ag::constant(x));
  CHECK(bitwise_equal(y.val(), x));

  // Zero input returns the bias row.
  for (auto& v : proj.bias.node()->value.data) v = 2.5f;
  auto yb = proj.forward(ag::constant(TensorF::zeros({2, 4})));
  for (auto v : yb.val().data) CHECK(v == 2.5f);

  // G_c over the f_v grid produces (H/p)*(W/p) tokens of width embed_dim.
  ModelConfig cfg = validate_config({});
  nn::ParamStore<float> ps2(10);
  nn::Linear<float> g_c(ps2, "g_c", cfg.vanilla_dim, cfg.embed_dim);
  auto tokens = g_c.forward(ag::constant(TensorF::zeros({cfg.vision_tokens(), cfg.vanilla_dim})));
  CHECK(tokens.rows() == cfg.vision_tokens());
  CHECK(tokens.cols() == cfg.embed_dim);
}

TEST_CASE("visual prompt sampling follows the cell rules") {
  // Hand-built 2x2 grid with per-channel values {1,2,3,4}.
  FeatureGrid<float> grid;
  grid.h = 2;
  grid.w = 2;
  TensorF f({4, 3});
  for (int cell = 0; cell < 4; ++cell)
    for (int ch = 0; ch < 3; ++ch) f.at(cell, ch) = static_cast<float>(cell + 1);
  grid.feat = ag::constant(f);
  int image_size = 16;

  SECTION("box covering all four cells averages to 2.5") {
    Region r;
    r.kind = Region::Kind::box;
    r.box = {0, 0, 1, 1};
    auto s = sample_visual_prompt(grid, r, image_size);
    CHECK_FALSE(s.fallback);
    CHECK(s.cells.size() == 4);
    for (int ch = 0; ch < 3; ++ch) CHECK(s.embed.val().at(0, ch) == Catch::Approx(2.5));
  }
  SECTION("box covering the whole image equals the global mean") {
    Region r;
    r.kind = Region::Kind::box;
    r.box = {0, 0, 1, 1};
    auto s = sample_visual_prompt(grid, r, image_size);
    double mean = (1 + 2 + 3 + 4) / 4.0;
    CHECK(s.embed.val().at(0, 0) == Catch::Approx(mean));
  }
  SECTION("point at the origin picks the top-left cell") {
    Region r;
    r.kind = Region::Kind::point;
    r.point = {0.0, 0.0};
    auto s = sample_visual_prompt(grid, r, image_size);
    REQUIRE(s.cells == std::vector<int>{0});
    CHECK(s.embed.val().at(0, 0) == 1.0f);
  }
  SECTION("tiny box rasterizing to no cell centers falls back with a flag") {
    Region r;
    r.kind = Region::Kind::box;
    r.box = {0.30, 0.30, 0.32, 0.32};  // contains no cell center
    auto s = sample_visual_prompt(grid, r, image_size);
    CHECK(s.fallback);
    CHECK(s.cells.size() == 1);
  }
  SECTION("mask selects cells with at least half coverage") {
    Region r;
    r.kind = Region::Kind::mask;
    r.mask = BinMask(image_size, image_size);
    for (int y = 0; y < 8; ++y)
      for (int x = 0; x < 8; ++x) r.mask.at(y, x) = 1;  // exactly cell 0
    auto s = sample_visual_prompt(grid, r, image_size);
    CHECK(s.cells == std::vector<int>{0});
  }
  SECTION("box content outside the region does not affect the embedding") {
    Region r;
    r.kind = Region::Kind::box;
    r.box = {0.0, 0.0, 0.5, 0.5};  // cell 0 only
    auto s1 = sample_visual_prompt(grid, r, image_size);
    TensorF f2 = f;
    f2.at(3, 0) = 99.0f;  // change an outside cell
    FeatureGrid<float> grid2{ag::constant(f2), 2, 2};
    auto s2 = sample_visual_prompt(grid2, r, image_size);
    CHECK(bitwise_equal(s1.embed.val(), s2.embed.val()));
  }
}

TEST_CASE("encoder outputs are finite for random inputs in [0,1]") {
  ModelConfig cfg = tiny_cfg();
  nn::ParamStore<float> ps(11);
  VanillaEncoder<float> venc(ps, "v", cfg);
  PyramidEncoder<float> penc(ps, "p", cfg);
  Rng rng(12);
  for (int trial = 0; trial < 5; ++trial) {
    TensorF img({cfg.image_size * cfg.image_size, 3});
    for (auto& v : img.data) v = static_cast<float>(rng.uniform());
    auto g = venc.forward(ag::constant(img));
    auto ms = penc.forward(ag::constant(img));
    CHECK(g.feat.val().all_finite());
    for (const auto& s : ms.scales) CHECK(s.feat.val().all_finite());
  }
}
