#include <gtest/gtest.h>

#include <cmath>

#include "gradcheck.hpp"
#include "sgi/objectives.hpp"
#include "sgi/shape_net.hpp"
#include "test_util.hpp"

using namespace sgi;
using namespace sgi::shape;
using sgi::testing::check_gradients;
using sgi::testing::random_leaf;
using sgi::testing::random_tensor;

namespace {

template <class M>
void zero_params(M& m) {
  for (auto& p : nn::parameters_of(m)) p.var.mutable_value().fill(0.0);
}

std::vector<Shape> shapes_of(const ShapeTrace& t) {
  std::vector<Shape> out;
  for (const auto& [name, s] : t) out.push_back(s);
  return out;
}

ShapeNetConfig tiny_config() {
  ShapeNetConfig c;
  c.canonical_size = 16;
  c.latent_dim = 4;
  c.enc_width = 2;
  c.gen_width = 8;
  c.disc_width = 2;
  c.fc_channels = 2;
  return c;
}

Tensor random_mask(Rng& rng, int n, int c) {
  Tensor m({n, 1, c, c});
  for (auto& v : m.values()) v = uniform_real(rng, 0, 1) < 0.4 ? 1.0 : 0.0;
  return m;
}

}  // namespace

TEST(ShapeEncoder, TableChain) {
  ShapeNetConfig cfg;
  ShapeEncoder es(cfg);
  Rng rng(1);
  es.init(rng);
  ShapeTrace trace;
  Var in(random_tensor({1, 4104}, rng, 0, 1));
  const auto post = es(in, &trace);
  const std::vector<Shape> expect{{1, 4104}, {1, 8192}, {1, 8, 32, 32}, {1, 32, 32, 32}, {1, 64, 16, 16},
                                  {1, 128, 8, 8}, {1, 256, 4, 4}, {1, 64}, {1, 64}};
  EXPECT_EQ(shapes_of(trace), expect);
  EXPECT_EQ(cfg.input_dim(), 4104);
  EXPECT_EQ(post.mu.shape(), (Shape{1, 64}));
  EXPECT_THROW(es(Var(Tensor({1, 4100})), nullptr), ShapeError);
}

TEST(ShapeEncoder, ZeroWeightsGiveZeroPosterior) {
  ShapeNetConfig cfg = tiny_config();
  ShapeEncoder es(cfg);
  zero_params(es);
  Rng rng(2);
  const auto post = es(Var(random_tensor({3, cfg.input_dim()}, rng)));
  for (double v : post.mu.value().values()) EXPECT_EQ(v, 0.0);
  for (double v : post.logvar.value().values()) EXPECT_EQ(v, 0.0);
}

TEST(ShapeEncoder, DifferentShapesGiveDifferentMeans) {
  ShapeNetConfig cfg = tiny_config();
  ShapeEncoder es(cfg);
  Rng rng(3);
  es.init(rng);
  Tensor a = random_tensor({1, cfg.input_dim()}, rng, 0, 1), b = a;
  for (int i = 0; i < 20; ++i) b[i] = 1.0 - b[i];
  EXPECT_GT(max_abs_diff(es(Var(a)).mu.value(), es(Var(b)).mu.value()), 0.0);
}

TEST(ShapeGenerator, TableChainAndRange) {
  ShapeNetConfig cfg;
  ShapeGenerator gs(cfg);
  Rng rng(4);
  gs.init(rng);
  ShapeTrace trace;
  Var z(random_tensor({2, 64}, rng)), c(random_tensor({2, 8}, rng));
  const Var out = gs(z, c, &trace);
  const std::vector<Shape> expect{{2, 72, 1, 1}, {2, 256, 4, 4}, {2, 128, 8, 8}, {2, 64, 16, 16}, {2, 32, 32, 32},
                                  {2, 1, 64, 64}};
  EXPECT_EQ(shapes_of(trace), expect);
  for (double v : out.value().values()) {
    ASSERT_GT(v, 0.0);
    ASSERT_LT(v, 1.0);
  }
  EXPECT_EQ(gs(z, c).value().storage(), out.value().storage());
}

TEST(ShapeGenerator, ZeroWeightsGiveOneHalf) {
  ShapeNetConfig cfg = tiny_config();
  ShapeGenerator gs(cfg);
  zero_params(gs);
  Rng rng(5);
  const Var out = gs(Var(random_tensor({2, 4}, rng)), Var(random_tensor({2, 8}, rng)));
  for (double v : out.value().values()) EXPECT_EQ(v, 0.5);
}

TEST(ShapeGenerator, TwoLatentsGiveDifferentShapes) {
  ShapeNetConfig cfg;
  ShapeGenerator gs(cfg);
  Rng rng(6);
  gs.init(rng);
  const Tensor cond = shape_condition(data::ObjectClass::car, mask::bbox_theta({10, 10, 40, 20}), 64);
  LatentPosterior prior{Var(Tensor({1, 64})), Var(Tensor({1, 64}))};
  Rng zr(7);
  const Var a = gs(sample_latent(prior, zr), Var(cond));
  const Var b = gs(sample_latent(prior, zr), Var(cond));
  EXPECT_GT(max_abs_diff(a.value(), b.value()), 0.0);
}

TEST(ShapeDiscriminator, ScoresPerSample) {
  ShapeNetConfig cfg;
  ShapeDiscriminator ds(cfg);
  Rng rng(8);
  ds.init(rng);
  ShapeTrace trace;
  const Var out = ds(Var(random_mask(rng, 3, 64)), &trace);
  EXPECT_EQ(out.shape(), (Shape{3, 1}));
  EXPECT_EQ(trace[1].second, (Shape{3, 64, 32, 32}));
  EXPECT_EQ(trace[trace.size() - 2].second, (Shape{3, 512, 4, 4}));
}

TEST(SampleLatent, ZeroVarianceLimit) {
  Rng rng(9);
  LatentPosterior post{Var(random_tensor({2, 8}, rng)), Var(Tensor({2, 8}, -40.0))};
  Rng zr(10);
  const Var z = sample_latent(post, zr);
  EXPECT_LT(max_abs_diff(z.value(), post.mu.value()), 1e-8);
}

TEST(SampleLatent, StandardNormalMoments) {
  constexpr int kN = 100000, kZ = 4;
  LatentPosterior post{Var(Tensor({kN, kZ})), Var(Tensor({kN, kZ}))};
  Rng rng(11);
  const Tensor z = sample_latent(post, rng).value();
  for (int d = 0; d < kZ; ++d) {
    double s = 0, s2 = 0;
    for (int i = 0; i < kN; ++i) {
      const double v = z[static_cast<int64_t>(i) * kZ + d];
      s += v;
      s2 += v * v;
    }
    const double mean = s / kN, var = s2 / kN - mean * mean;
    EXPECT_NEAR(mean, 0.0, 0.02);
    EXPECT_NEAR(var, 1.0, 0.02);
  }
}

TEST(SampleLatent, ReproducibleAndDifferentiable) {
  Rng rng(12);
  Var mu = random_leaf({1, 8}, rng), logvar = random_leaf({1, 8}, rng);
  LatentPosterior post{mu, logvar};
  Rng a(13), b(13);
  EXPECT_EQ(sample_latent(post, a).value().storage(), sample_latent(post, b).value().storage());
  const Tensor eps = random_tensor({1, 8}, rng);
  Var w(random_tensor({1, 8}, rng));
  auto r = check_gradients([&] { return nn::sum(nn::mul(reparameterize(post, eps), w)); }, {mu, logvar});
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(PlaceShape, OnesBlockAtBbox) {
  const Tensor ones({1, 1, 64, 64}, 1.0);
  const Tensor placed = place_shape(ones, {mask::bbox_theta({50, 70, 64, 64})}, 256, 256);
  for (int y = 0; y < 256; ++y)
    for (int x = 0; x < 256; ++x) {
      const bool in = x >= 50 && x < 114 && y >= 70 && y < 134;
      ASSERT_EQ(placed.at(0, 0, y, x), in ? 1.0 : 0.0);
    }
}

TEST(PlaceShape, ZerosStayZeroAndOutputIsBinary) {
  const Tensor placed = place_shape(Tensor({1, 1, 64, 64}), {mask::bbox_theta({0, 0, 100, 30})}, 256, 256);
  for (double v : placed.values()) ASSERT_EQ(v, 0.0);
  Rng rng(14);
  const Tensor soft = random_tensor({1, 1, 64, 64}, rng, 0, 1);
  const Tensor hard = place_shape(soft, {mask::bbox_theta({5, 5, 90, 60})}, 128, 128);
  for (double v : hard.values()) ASSERT_TRUE(v == 0.0 || v == 1.0);
}

TEST(PlaceShape, SingularThetaFails) {
  EXPECT_THROW(place_shape(Tensor({1, 1, 64, 64}, 1.0), {nn::Affine{0, 0, 5, 0, 1, 5}}, 64, 64), std::invalid_argument);
}

TEST(ShapeLosses, KlFixedPoints) {
  const int z = 16;
  LatentPosterior zero{Var(Tensor({1, z})), Var(Tensor({1, z}))};
  const Tensor m({1, 1, 4, 4}, 1.0);
  EXPECT_NEAR(shape_losses(Var(m), Var(m), zero).vae.item(), 0.0, 1e-12);
  LatentPosterior ones{Var(Tensor({1, z}, 1.0)), Var(Tensor({1, z}))};
  EXPECT_NEAR(shape_losses(Var(m), Var(m), ones).vae.item(), 0.5 * z, 1e-12);
  EXPECT_EQ(shape_losses(Var(m), Var(m), ones).rec.item(), 0.0);
  Rng rng(15);
  for (int i = 0; i < 20; ++i) {
    LatentPosterior p{Var(random_tensor({2, z}, rng, -2, 2)), Var(random_tensor({2, z}, rng, -2, 2))};
    EXPECT_GE(shape_losses(Var(m), Var(m), p).vae.item(), 0.0);
  }
}

TEST(ShapeLosses, KlMatchesMonteCarlo) {
  Rng rng(16);
  const Tensor mu = random_tensor({1, 4}, rng, -1, 1), logvar = random_tensor({1, 4}, rng, -1, 1);
  const Tensor m({1, 1, 2, 2});
  const double closed = shape_losses(Var(m), Var(m), {Var(mu), Var(logvar)}).vae.item();
  constexpr int kSamples = 1000000;
  double acc = 0;
  for (int s = 0; s < kSamples; ++s) {
    double log_ratio = 0;
    for (int d = 0; d < 4; ++d) {
      const double e = normal(rng);
      const double zv = mu[d] + std::exp(0.5 * logvar[d]) * e;
      // log q - log p, constants cancel
      log_ratio += -0.5 * logvar[d] - 0.5 * e * e + 0.5 * zv * zv;
    }
    acc += log_ratio;
  }
  EXPECT_NEAR(acc / kSamples, closed, 1e-2);
}

TEST(ShapeLosses, GradientsMatchFiniteDifferences) {
  Rng rng(17);
  Var mu = random_leaf({1, 8}, rng), logvar = random_leaf({1, 8}, rng);
  const Tensor ms = random_mask(rng, 1, 2);  // 4 elements
  Var mhat = random_leaf({1, 1, 2, 2}, rng, 0.05, 0.95);
  for (int64_t i = 0; i < 4; ++i)
    if (std::abs(mhat.value()[i] - ms[i]) < 1e-3) mhat.mutable_value()[i] += 0.1;
  auto vae = check_gradients([&] { return shape_losses(Var(ms), mhat, {mu, logvar}).vae; }, {mu, logvar});
  EXPECT_LT(vae.max_rel_error, 1e-4);
  auto rec = check_gradients([&] { return shape_losses(Var(ms), mhat, {mu, logvar}).rec; }, {mhat});
  EXPECT_LT(rec.max_rel_error, 1e-4);
}

TEST(ShapeLosses, GradientsThroughGeneratorParameters) {
  ShapeNetConfig cfg = tiny_config();
  ShapeGenerator gs(cfg);
  Rng rng(18);
  gs.init(rng);
  for (auto& p : nn::parameters_of(gs)) {
    for (auto& v : p.var.mutable_value().values()) v *= 20;  // away from the flat sigmoid center
    p.var.node()->requires_grad = true;
  }
  const Tensor z = random_tensor({1, 4}, rng), cond = random_tensor({1, 8}, rng);
  const Tensor ms = random_mask(rng, 1, 16);
  LatentPosterior post{Var(Tensor({1, 4})), Var(Tensor({1, 4}))};
  // output deconvolution; earlier biases sit in front of instance norm and get exactly zero gradient
  const std::string last = "up" + std::to_string(gs.ups.size() - 1) + ".";
  std::vector<Var> leaves;
  for (auto& p : nn::parameters_of(gs))
    if (p.name.rfind(last, 0) == 0) leaves.push_back(p.var);
  ASSERT_FALSE(leaves.empty());
  auto r = check_gradients([&] { return shape_losses(Var(ms), gs(Var(z), Var(cond)), post).rec; }, leaves);
  EXPECT_LT(r.max_rel_error, 1e-4);
}

TEST(ShapeAdversarial, LsganFixedPoints) {
  auto pair = [](double r, double f) { return shape_adversarial(Var(Tensor({1, 1}, r)), Var(Tensor({1, 1}, f))); };
  EXPECT_EQ(pair(1, 0).d_loss.item(), 0.0);
  EXPECT_DOUBLE_EQ(pair(0, 1).d_loss.item(), 1.0);
  EXPECT_EQ(pair(0.3, 1).g_loss.item(), 0.0);
  EXPECT_DOUBLE_EQ(pair(0.3, 0).g_loss.item(), 0.5);
}

TEST(ShapeObjective, JointIsWeightedSum) {
  obj::LossWeights w;
  std::map<std::string, Var> terms{{"shape_vae", Var(Tensor::scalar(0.7))},
                                   {"shape_rec", Var(Tensor::scalar(0.11))},
                                   {"shape_adv_G", Var(Tensor::scalar(0.3))}};
  EXPECT_DOUBLE_EQ(obj::weighted_shape_total(terms, w).item(), 5 * 0.7 + 20 * 0.11 + 1 * 0.3);
  w.vae = 10;
  EXPECT_DOUBLE_EQ(obj::weighted_shape_total(terms, w).item(), 10 * 0.7 + 20 * 0.11 + 1 * 0.3);
}

TEST(ShapeInputs, ConcatenatesMaskClassAndTheta) {
  mask::InstanceSpec spec;
  spec.cls = data::ObjectClass::pedestrian;
  spec.m_s = Tensor({1, 1, 64, 64});
  spec.m_s[5] = 1;
  spec.theta = mask::bbox_theta({64, 32, 32, 64});
  const Tensor in = shape_inputs({spec});
  EXPECT_EQ(in.shape(), (Shape{1, 4104}));
  EXPECT_EQ(in[5], 1.0);
  EXPECT_EQ(in[4096], 0.0);
  EXPECT_EQ(in[4097], 1.0);
  const Tensor cond = shape_conditions({spec});
  EXPECT_EQ(cond.shape(), (Shape{1, 8}));
  for (int i = 0; i < 8; ++i) EXPECT_EQ(cond[i], in[4096 + i]);
}
