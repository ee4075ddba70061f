#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "sgi/generator.hpp"
#include "test_util.hpp"

using namespace sgi;
using namespace sgi::gen;
using sgi::testing::check_gradients;
using sgi::testing::random_tensor;

namespace {

GeneratorConfig small_config(int c = 3, int size = 32) {
  GeneratorConfig g;
  g.num_classes = c;
  g.image_size = size;
  g.enc_widths = {4, 4, 6, 6, 8};
  g.dec_widths = {6, 6, 4, 4};
  g.final_width = 4;
  g.spade_hidden = 4;
  return g;
}

struct Inputs {
  Var x, m, s, inst;
};

Inputs random_inputs(const GeneratorConfig& cfg, int n, Rng& rng) {
  const int s = cfg.image_size;
  Tensor m({n, 1, s, s}, 1.0);
  for (int b = 0; b < n; ++b)
    for (int y = s / 4; y < s / 2; ++y)
      for (int x = s / 4; x < s / 2 + 2; ++x) m.at(b, 0, y, x) = 0.0;
  Tensor x = random_tensor({n, 3, s, s}, rng);
  Tensor seg({n, cfg.num_classes, s, s});
  for (int b = 0; b < n; ++b)
    for (int y = 0; y < s; ++y)
      for (int xx = 0; xx < s; ++xx) {
        for (int c = 0; c < 3; ++c) x.at(b, c, y, xx) *= m.at(b, 0, y, xx);
        if (m.at(b, 0, y, xx) > 0) seg.at(b, uniform_int(rng, 0, cfg.num_classes - 1), y, xx) = 1.0;
      }
  Tensor inst({n, 1, s, s});
  for (int y = s / 4 + 2; y < s / 2 - 2; ++y) inst.at(0, 0, y, s / 4 + 3) = 1.0;
  return {Var(x), Var(m), Var(seg), Var(inst)};
}

void expect_simplex(const Tensor& t) {
  const int64_t n = t.dim(0), c = t.dim(1), hw = t.dim(2) * t.dim(3);
  for (int64_t b = 0; b < n; ++b)
    for (int64_t p = 0; p < hw; ++p) {
      double s = 0;
      for (int64_t k = 0; k < c; ++k) {
        const double v = t[(b * c + k) * hw + p];
        ASSERT_GE(v, 0.0);
        s += v;
      }
      ASSERT_NEAR(s, 1.0, 1e-5);
    }
}

template <class M>
void zero_params(M& m) {
  for (auto& p : nn::parameters_of(m)) p.var.mutable_value().fill(0.0);
}

}  // namespace

class FullSizeChain : public ::testing::TestWithParam<int> {};

TEST_P(FullSizeChain, TableShapes) {
  const int c = GetParam();
  GeneratorConfig cfg;
  cfg.num_classes = c;
  InpaintGenerator g(cfg);
  Rng rng(static_cast<uint64_t>(c));
  g.init(rng);
  Inputs in = random_inputs(cfg, 1, rng);
  ShapeTrace trace;
  NoGradGuard ng;
  const GenerationOutput out = g(in.x, in.m, in.s, in.inst, &trace);
  std::map<std::string, Shape> got(trace.begin(), trace.end());
  EXPECT_EQ(got["e_im.input"], (Shape{1, 4, 256, 256}));
  EXPECT_EQ(got["e_se.input"], (Shape{1, c + 2, 256, 256}));
  const std::vector<Shape> enc{{1, 32, 256, 256}, {1, 64, 128, 128}, {1, 128, 64, 64}, {1, 256, 32, 32}, {1, 512, 16, 16}};
  for (int i = 0; i < 5; ++i) {
    EXPECT_EQ(got["e_im.conv" + std::to_string(i)], enc[static_cast<size_t>(i)]);
    EXPECT_EQ(got["e_se.conv" + std::to_string(i)], enc[static_cast<size_t>(i)]);
  }
  EXPECT_EQ(got["fuse.concat"], (Shape{1, 1024, 16, 16}));
  for (int i = 0; i < 9; ++i) EXPECT_EQ(got["fuse.block" + std::to_string(i)], (Shape{1, 1024, 16, 16}));
  const std::vector<std::pair<int, int>> dec{{512, 32}, {256, 64}, {128, 128}, {64, 256}};
  for (int i = 0; i < 4; ++i) {
    const auto [w, r] = dec[static_cast<size_t>(i)];
    EXPECT_EQ(got["block" + std::to_string(i) + ".features"], (Shape{1, w, r, r}));
    EXPECT_EQ(got["block" + std::to_string(i) + ".seg"], (Shape{1, c, r, r}));
    expect_simplex(out.scale_segs[static_cast<size_t>(i)].value());
  }
  EXPECT_EQ(got["final_block"], (Shape{1, 32, 256, 256}));
  EXPECT_EQ(out.x_filled.shape(), (Shape{1, 3, 256, 256}));
  EXPECT_EQ(out.s_filled.shape(), (Shape{1, c, 256, 256}));
  ASSERT_EQ(out.scale_segs.size(), 4u);
  for (double v : out.x_filled.value().values()) {
    ASSERT_TRUE(std::isfinite(v));
    ASSERT_GE(v, -1.0);
    ASSERT_LE(v, 1.0);
  }
}

INSTANTIATE_TEST_SUITE_P(Classes, FullSizeChain, ::testing::Values(2, 17, 21));

TEST(Generator, ShapesForAnyClassCountAndBatch) {
  for (int c : {1, 2, 5, 40}) {
    const GeneratorConfig cfg = small_config(c);
    InpaintGenerator g(cfg);
    Rng rng(static_cast<uint64_t>(c) + 100);
    g.init(rng);
    for (int n : {1, 3}) {
      Inputs in = random_inputs(cfg, n, rng);
      const auto out = g(in.x, in.m, in.s, in.inst);
      EXPECT_EQ(out.x_filled.shape(), (Shape{n, 3, 32, 32}));
      EXPECT_EQ(out.s_filled.shape(), (Shape{n, c, 32, 32}));
      for (const auto& s : out.scale_segs) expect_simplex(s.value());
    }
  }
}

TEST(Generator, WrongChannelCountFails) {
  const GeneratorConfig cfg = small_config();
  InpaintGenerator g(cfg);
  Rng rng(1);
  g.init(rng);
  Inputs in = random_inputs(cfg, 1, rng);
  EXPECT_THROW(g.encode_semantics(Var(Tensor({1, 5, 32, 32})), in.m, in.inst), ShapeError);
  EXPECT_THROW(g.encode_image(Var(Tensor({1, 2, 32, 32})), in.m), ShapeError);
}

TEST(Generator, ZeroInputGivesZeroEncoding) {
  const GeneratorConfig cfg = small_config();
  InpaintGenerator g(cfg);
  Rng rng(2);
  g.init(rng);
  const Var f = g.encode_image(Var(Tensor({1, 3, 32, 32})), Var(Tensor({1, 1, 32, 32})));
  EXPECT_EQ(f.shape(), (Shape{1, 8, 2, 2}));
  for (double v : f.value().values()) EXPECT_EQ(v, 0.0);
}

TEST(Generator, BatchIndependence) {
  const GeneratorConfig cfg = small_config();
  InpaintGenerator g(cfg);
  Rng rng(3);
  g.init(rng);
  Inputs two = random_inputs(cfg, 2, rng);
  const auto both = g(two.x, two.m, two.s, two.inst);
  for (int64_t b = 0; b < 2; ++b) {
    const auto one = g(nn::slice_batch(two.x, b, 1), nn::slice_batch(two.m, b, 1), nn::slice_batch(two.s, b, 1),
                       nn::slice_batch(two.inst, b, 1));
    EXPECT_EQ(max_abs_diff(one.x_filled.value(), nn::slice_batch(both.x_filled, b, 1).value()), 0.0);
    EXPECT_EQ(max_abs_diff(one.s_filled.value(), nn::slice_batch(both.s_filled, b, 1).value()), 0.0);
  }
}

TEST(Generator, ClassPermutationEquivalence) {
  const GeneratorConfig cfg = small_config(4);
  InpaintGenerator g(cfg);
  Rng rng(4);
  g.init(rng);
  Inputs in = random_inputs(cfg, 1, rng);
  const Tensor ref = g.encode_semantics(in.s, in.m, in.inst).value();
  const std::vector<int> perm{2, 0, 3, 1};
  Tensor s2 = in.s.value();
  for (int c = 0; c < 4; ++c)
    for (int y = 0; y < 32; ++y)
      for (int x = 0; x < 32; ++x) s2.at(0, perm[static_cast<size_t>(c)], y, x) = in.s.value().at(0, c, y, x);
  Tensor& w = g.e_se.convs[0].weight.mutable_value();
  const Tensor w0 = w;
  for (int o = 0; o < w.dim(0); ++o)
    for (int c = 0; c < 4; ++c)
      for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 5; ++j) w.at(o, perm[static_cast<size_t>(c)], i, j) = w0.at(o, c, i, j);
  EXPECT_LT(max_abs_diff(g.encode_semantics(Var(s2), in.m, in.inst).value(), ref), 1e-12);
}

TEST(Generator, ZeroInstanceChannelIsValid) {
  const GeneratorConfig cfg = small_config();
  InpaintGenerator g(cfg);
  Rng rng(5);
  g.init(rng);
  Inputs in = random_inputs(cfg, 1, rng);
  const auto out = g(in.x, in.m, in.s, Var(Tensor({1, 1, 32, 32})));
  EXPECT_TRUE(out.x_filled.value().all_finite());
}

TEST(Fusion, ZeroResidualBranchIsIdentity) {
  const GeneratorConfig cfg = small_config();
  InpaintGenerator g(cfg);
  Rng rng(6);
  g.init(rng);
  for (auto& b : g.fusion) zero_params(b.conv2);
  Var a(random_tensor({1, 8, 2, 2}, rng)), b(random_tensor({1, 8, 2, 2}, rng));
  const Var out = g.fuse(a, b);
  EXPECT_EQ(max_abs_diff(out.value(), nn::concat_channels({a, b}).value()), 0.0);
}

TEST(Fusion, ReceptiveFieldCoversBottleneck) {
  GeneratorConfig cfg = small_config(3, 256);
  int rf = 1;
  for (int d : cfg.dilations) rf += 2 * d + 2;  // dilated 3x3 then plain 3x3
  EXPECT_GE(rf, 16);
  // empirically: a corner perturbation reaches the opposite corner of a 16x16 map
  cfg.enc_widths = {2, 2, 2, 2, 2};
  InpaintGenerator g(cfg);
  Rng rng(7);
  g.init(rng);
  Var a(random_tensor({1, 2, 16, 16}, rng)), b(random_tensor({1, 2, 16, 16}, rng));
  const Tensor ref = g.fuse(a, b).value();
  a.mutable_value().at(0, 0, 0, 0) += 1.0;
  const Tensor moved = g.fuse(a, b).value();
  EXPECT_NE(moved.at(0, 0, 15, 15), ref.at(0, 0, 15, 15));
}

TEST(DecoderBlock, ZeroModulationReducesToNormalization) {
  const GeneratorConfig cfg = small_config();
  Spade spade(6, 3, 4);
  Rng rng(8);
  spade.init(rng, 0.5);
  zero_params(spade.gamma);
  zero_params(spade.beta);
  Var x(random_tensor({1, 6, 4, 4}, rng)), seg(random_tensor({1, 3, 4, 4}, rng, 0, 1));
  EXPECT_EQ(max_abs_diff(spade(x, seg, NormKind::instance).value(), nn::instance_norm(x).value()), 0.0);

  DecoderBlock block(8, 6, cfg);
  block.init(rng, 0.5);
  for (Spade* s : {&block.res.norm0, &block.res.norm1}) {
    zero_params(s->gamma);
    zero_params(s->beta);
  }
  zero_params(block.res.conv1);
  Var in(random_tensor({1, 8, 2, 2}, rng));
  const auto out = block(in, NormKind::instance);
  const Var up = nn::pixel_shuffle(block.upsample(in), 2);
  EXPECT_EQ(max_abs_diff(out.features.value(), up.value()), 0.0);
  EXPECT_FALSE(block.res.learned_skip);
  expect_simplex(out.seg.value());
}

TEST(DecoderBlock, StageOneShapes) {
  GeneratorConfig cfg;
  cfg.num_classes = 17;
  cfg.spade_hidden = 8;
  DecoderBlock block(1024, 512, cfg);
  Rng rng(9);
  block.init(rng, 0.02);
  NoGradGuard ng;
  const auto out = block(Var(random_tensor({1, 1024, 16, 16}, rng)), NormKind::instance);
  EXPECT_EQ(out.features.shape(), (Shape{1, 512, 32, 32}));
  EXPECT_EQ(out.seg.shape(), (Shape{1, 17, 32, 32}));
  expect_simplex(out.seg.value());
}

TEST(DecoderBlock, GradientsMatchFiniteDifferences) {
  const GeneratorConfig cfg = small_config(3);
  DecoderBlock block(4, 2, cfg);
  Rng rng(10);
  block.init(rng, 0.5);
  Var x(random_tensor({1, 4, 2, 2}, rng), true);
  Var w(random_tensor({1, 2, 4, 4}, rng));
  Var ws(random_tensor({1, 3, 4, 4}, rng));
  auto f = [&] {
    const auto o = block(x, NormKind::instance);
    return nn::add(nn::sum(nn::mul(o.features, w)), nn::sum(nn::mul(o.seg, ws)));
  };
  // a bias feeding straight into instance norm has zero true gradient, so only the absolute error means anything
  std::vector<Var> leaves{x};
  for (auto& p : nn::parameters_of(block)) {
    if (p.name == "res.conv0.bias") {
      EXPECT_LT(check_gradients(f, {p.var}).max_abs_error, 1e-8);
      continue;
    }
    leaves.push_back(p.var);
  }
  EXPECT_LT(check_gradients(f, leaves).max_rel_error, 1e-3);
}

TEST(Generator, EveryParameterGroupReceivesGradient) {
  const GeneratorConfig cfg = small_config();
  InpaintGenerator g(cfg);
  Rng rng(11);
  g.init(rng);
  Inputs in = random_inputs(cfg, 1, rng);
  const auto out = g(in.x, in.m, in.s, in.inst);
  nn::mean(out.x_filled).backward();
  std::map<std::string, double> group_norm;
  for (const auto& p : nn::parameters_of(g)) {
    const std::string group = p.name.substr(0, p.name.find('.', p.name.find('.') + 1));
    double s = 0;
    if (p.var.has_grad())
      for (double v : p.var.grad().values()) s += std::abs(v);
    group_norm[group] += s;
  }
  for (const char* want : {"e_im.conv0", "e_im.conv4", "e_se.conv0", "e_se.conv4", "fusion0.conv1", "fusion8.conv2",
                           "block0.upsample", "block3.upsample", "block0.seg_head", "block3.seg_head", "block0.res",
                           "block3.res", "final.conv0", "to_rgb.weight"}) {
    ASSERT_TRUE(group_norm.count(want)) << want;
    EXPECT_GT(group_norm[want], 0.0) << want;
  }
}

TEST(Generator, AblationVariantsRun) {
  for (int variant = 0; variant < 4; ++variant) {
    GeneratorConfig cfg = small_config();
    cfg.use_spade = variant != 0;
    cfg.use_semantic_encoder = variant != 1;
    cfg.learned_skip = variant == 2;
    cfg.norm = variant == 3 ? NormKind::batch : NormKind::instance;
    InpaintGenerator g(cfg);
    Rng rng(12);
    g.init(rng);
    Inputs in = random_inputs(cfg, 2, rng);
    const auto out = g(in.x, in.m, in.s, in.inst);
    EXPECT_EQ(out.x_filled.shape(), (Shape{2, 3, 32, 32})) << variant;
    EXPECT_TRUE(out.x_filled.value().all_finite());
  }
}

TEST(Composite, UnmaskedPixelsCopiedExactly) {
  Rng rng(13);
  const Tensor known = random_tensor({1, 3, 8, 8}, rng), gen = random_tensor({1, 3, 8, 8}, rng);
  Tensor m({1, 1, 8, 8}, 1.0);
  for (int i = 10; i < 30; ++i) m[i] = 0.0;
  const Tensor c = composite(known, gen, m);
  for (int ch = 0; ch < 3; ++ch)
    for (int i = 0; i < 64; ++i) EXPECT_EQ(c[ch * 64 + i], m[i] > 0 ? known[ch * 64 + i] : gen[ch * 64 + i]);
}
