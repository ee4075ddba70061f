#include <gtest/gtest.h>

#include <Eigen/Dense>
#include <cmath>

#include "gradcheck.hpp"
#include "sgi/objectives.hpp"
#include "test_util.hpp"

using namespace sgi;
using namespace sgi::obj;
using sgi::testing::check_gradients;
using sgi::testing::random_leaf;
using sgi::testing::random_tensor;

namespace {

Tensor one_hot_map(int n, int c, int h, int w, Rng& rng) {
  Tensor t({n, c, h, w});
  for (int b = 0; b < n; ++b)
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) t.at(b, uniform_int(rng, 0, c - 1), y, x) = 1.0;
  return t;
}

Tensor hole_mask(int n, int h, int w, int x0, int y0, int hw, int hh) {
  Tensor m({n, 1, h, w}, 1.0);
  for (int b = 0; b < n; ++b)
    for (int y = y0; y < y0 + hh; ++y)
      for (int x = x0; x < x0 + hw; ++x) m.at(b, 0, y, x) = 0.0;
  return m;
}

// One 3x3 conv to two channels: a small differentiable stand-in for the feature network.
class TwoChannelExtractor : public FeatureExtractor {
 public:
  explicit TwoChannelExtractor(Rng& rng) : conv_(3, 2, 3, nn::ConvOptions{1, 1, 1}) { conv_.init(rng, {0.5}); }
  std::vector<Var> features(const Var& x) const override { return {nn::tanh(conv_(x))}; }
  std::string name() const override { return "two"; }

 private:
  nn::Conv2d conv_;
};

LossBundle unit_bundle(double v) {
  LossBundle b;
  for (const auto& k : kGeneratorTerms) b.terms[k] = v;
  b.terms["adv_D"] = v;
  return b;
}

}  // namespace

TEST(SegLoss, PerfectPredictionIsZero) {
  Rng rng(1);
  const Tensor gt = one_hot_map(2, 17, 8, 8, rng);
  const double l = seg_multiscale_loss({Var(gt), Var(gt)}, Var(gt)).item();
  EXPECT_LE(std::abs(l), 1e-7);
}

TEST(SegLoss, UniformPredictionIsLogC) {
  Rng rng(2);
  const Tensor gt = one_hot_map(1, 17, 8, 8, rng);
  const Tensor uni({1, 17, 8, 8}, 1.0 / 17.0);
  const Tensor coarse({1, 17, 2, 2}, 1.0 / 17.0);
  // exact with the clamp removed
  EXPECT_NEAR(seg_multiscale_loss({Var(uni), Var(coarse)}, Var(gt), 0.0).item(), std::log(17.0), 1e-12);
  // with the default clamp, the closed form shifted by eps
  const double with_eps = -std::log(1.0 / 17.0 + 1e-8) + std::log1p(1e-8);
  EXPECT_NEAR(seg_multiscale_loss({Var(uni)}, Var(gt)).item(), with_eps, 1e-12);
}

TEST(SegLoss, ExactPlusUniformIsHalfLogC) {
  Rng rng(3);
  const Tensor gt = one_hot_map(1, 17, 8, 8, rng);
  const Tensor uni({1, 17, 4, 4}, 1.0 / 17.0);
  const double uniform_term = -std::log(1.0 / 17.0 + 1e-8) + std::log1p(1e-8);
  EXPECT_NEAR(seg_multiscale_loss({Var(gt), Var(uni)}, Var(gt)).item(), 0.5 * uniform_term, 1e-12);
  EXPECT_NEAR(seg_multiscale_loss({Var(gt), Var(uni)}, Var(gt)).item(), 0.5 * std::log(17.0), 1e-7);
}

TEST(SegLoss, NoScalesFails) {
  EXPECT_THROW(seg_multiscale_loss({}, Var(Tensor({1, 2, 2, 2}))), LossError);
}

TEST(SegLoss, DecreasesAsTrueClassMassGrows) {
  Rng rng(4);
  const Tensor gt = one_hot_map(1, 5, 4, 4, rng);
  double prev = 1e9;
  for (double p : {0.2, 0.4, 0.6, 0.8, 0.99}) {
    Tensor pred({1, 5, 4, 4});
    for (int c = 0; c < 5; ++c)
      for (int i = 0; i < 16; ++i) pred[c * 16 + i] = gt[c * 16 + i] > 0 ? p : (1 - p) / 4;
    const double l = seg_multiscale_loss({Var(pred)}, Var(gt)).item();
    EXPECT_LT(l, prev);
    prev = l;
  }
}

TEST(PixelRec, IdentityIsZero) {
  Rng rng(5);
  const Tensor x = random_tensor({2, 3, 16, 16}, rng);
  EXPECT_EQ(pixel_rec_loss(Var(x), Var(x), hole_mask(2, 16, 16, 2, 2, 4, 4)).item(), 0.0);
}

TEST(PixelRec, ConstantErrorInHoleIsHalf) {
  const Tensor gt({1, 3, 64, 64}, 0.1);
  const Tensor m = hole_mask(1, 64, 64, 8, 8, 32, 32);  // 1024 pixels
  Tensor filled = gt;
  for (int c = 0; c < 3; ++c)
    for (int y = 8; y < 40; ++y)
      for (int x = 8; x < 40; ++x) filled.at(0, c, y, x) += 0.5;
  EXPECT_NEAR(pixel_rec_loss(Var(filled), Var(gt), m).item(), 0.5, 1e-12);

  const Tensor m2 = hole_mask(1, 64, 64, 8, 8, 64 - 8, 32 * 32 * 2 / 56 + 1);
  double holes = 0;
  for (double v : m2.values()) holes += 1 - v;
  Tensor filled2 = gt;
  for (int c = 0; c < 3; ++c)
    for (int i = 0; i < 64 * 64; ++i)
      if (m2[i] == 0) filled2[c * 4096 + i] += 0.5;
  EXPECT_GT(holes, 1024 * 1.9);
  EXPECT_NEAR(pixel_rec_loss(Var(filled2), Var(gt), m2).item(), 0.5, 1e-12);
}

TEST(PixelRec, EmptyHoleFails) {
  const Tensor x({1, 3, 4, 4});
  EXPECT_THROW(pixel_rec_loss(Var(x), Var(x), Tensor({1, 1, 4, 4}, 1.0)), LossError);
}

TEST(FeatureMatching, Examples) {
  Rng rng(6);
  const Tensor a = random_tensor({1, 4, 5, 5}, rng);
  EXPECT_EQ(feature_matching_loss({{Var(a)}}, {{Var(a)}}).item(), 0.0);
  Tensor b = a;
  for (auto& v : b.values()) v += 0.2;
  EXPECT_NEAR(feature_matching_loss({{Var(a)}}, {{Var(b)}}).item(), 0.2, 1e-12);
  const Tensor c = random_tensor({1, 2, 3, 3}, rng), d = random_tensor({1, 2, 3, 3}, rng);
  const double one = feature_matching_loss({{Var(a), Var(c)}}, {{Var(b), Var(d)}}).item();
  const double two =
      feature_matching_loss({{Var(a), Var(c)}, {Var(a), Var(c)}}, {{Var(b), Var(d)}, {Var(b), Var(d)}}).item();
  EXPECT_NEAR(one, two, 1e-12);
  EXPECT_THROW(feature_matching_loss({{Var(a)}}, {{Var(a)}, {Var(a)}}), LossError);
  EXPECT_THROW(feature_matching_loss({{Var(a)}}, {{Var(c)}}), LossError);
}

TEST(Perceptual, Examples) {
  Rng rng(7);
  const Tensor x = random_tensor({1, 3, 8, 8}, rng), y = random_tensor({1, 3, 8, 8}, rng);
  StubExtractor stub;
  EXPECT_EQ(perceptual_loss(Var(x), Var(x), stub).item(), 0.0);
  IdentityExtractor id;
  double mean_abs = 0;
  for (int64_t i = 0; i < x.numel(); ++i) mean_abs += std::abs(x[i] - y[i]);
  mean_abs /= static_cast<double>(x.numel());
  EXPECT_NEAR(perceptual_loss(Var(x), Var(y), id).item(), mean_abs, 1e-12);
  EXPECT_NEAR(perceptual_loss(Var(x), Var(y), stub).item(), perceptual_loss(Var(y), Var(x), stub).item(), 1e-12);
}

TEST(Style, Examples) {
  IdentityExtractor id;
  EXPECT_NEAR(style_loss(Var(Tensor({1, 1, 1, 1}, 2.0)), Var(Tensor({1, 1, 1, 1}, 1.0)), id).item(), 3.0, 1e-12);
  Rng rng(8);
  const Tensor x = random_tensor({1, 3, 8, 8}, rng);
  StubExtractor stub;
  EXPECT_EQ(style_loss(Var(x), Var(x), stub).item(), 0.0);
}

TEST(Style, GramIsSymmetricPsd) {
  Rng rng(9);
  for (int trial = 0; trial < 5; ++trial) {
    const Tensor g = nn::gram(Var(random_tensor({2, 5, 4, 3}, rng))).value();
    for (int b = 0; b < 2; ++b) {
      Eigen::MatrixXd m(5, 5);
      for (int i = 0; i < 5; ++i)
        for (int j = 0; j < 5; ++j) m(i, j) = g[b * 25 + i * 5 + j];
      EXPECT_LT((m - m.transpose()).cwiseAbs().maxCoeff(), 1e-15);
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(m);
      EXPECT_GE(es.eigenvalues().minCoeff(), -1e-12);
    }
  }
}

TEST(Lsgan, Examples) {
  const Var ones(Tensor({1, 1, 4, 4}, 1.0)), zeros(Tensor({1, 1, 4, 4})), half(Tensor({1, 1, 4, 4}, 0.5));
  EXPECT_EQ(lsgan_d_loss({ones}, {zeros}).item(), 0.0);
  EXPECT_NEAR(lsgan_d_loss({half}, {half}).item(), 0.25, 1e-15);
  EXPECT_EQ(lsgan_g_loss({ones}).item(), 0.0);
  EXPECT_THROW(lsgan_d_loss({ones}, {}), LossError);
}

TEST(LossProperties, NonNegativeOnRandomInputs) {
  Rng rng(10);
  StubExtractor stub;
  for (int t = 0; t < 5; ++t) {
    const Tensor x = random_tensor({1, 3, 8, 8}, rng), y = random_tensor({1, 3, 8, 8}, rng);
    EXPECT_GE(pixel_rec_loss(Var(x), Var(y), hole_mask(1, 8, 8, 1, 1, 3, 3)).item(), 0.0);
    EXPECT_GE(perceptual_loss(Var(x), Var(y), stub).item(), 0.0);
    EXPECT_GE(style_loss(Var(x), Var(y), stub).item(), 0.0);
    EXPECT_GE(lsgan_d_loss({Var(x)}, {Var(y)}).item(), 0.0);
    EXPECT_GE(lsgan_g_loss({Var(y)}).item(), 0.0);
  }
}

TEST(LossGradients, MatchFiniteDifferences) {
  Rng rng(11);
  constexpr double kTol = 1e-4;
  Var x = random_leaf({1, 3, 4, 4}, rng);
  const Tensor gt = random_tensor({1, 3, 4, 4}, rng);
  const Tensor m = hole_mask(1, 4, 4, 1, 1, 2, 2);
  EXPECT_LT(check_gradients([&] { return pixel_rec_loss(x, Var(gt), m); }, {x}).max_rel_error, kTol);

  StubExtractor stub(1234, {2, 2, 2, 2});
  EXPECT_LT(check_gradients([&] { return perceptual_loss(x, Var(gt), stub); }, {x}).max_rel_error, kTol);
  TwoChannelExtractor two(rng);
  EXPECT_LT(check_gradients([&] { return style_loss(x, Var(gt), two); }, {x}).max_rel_error, kTol);

  Var logits = random_leaf({1, 3, 4, 4}, rng);
  Var coarse = random_leaf({1, 3, 2, 2}, rng);
  const Tensor seg_gt = one_hot_map(1, 3, 4, 4, rng);
  EXPECT_LT(check_gradients(
                [&] {
                  return seg_multiscale_loss({nn::softmax_channels(logits), nn::softmax_channels(coarse)}, Var(seg_gt));
                },
                {logits, coarse})
                .max_rel_error,
            kTol);

  Var real = random_leaf({1, 2, 4, 4}, rng), fake = random_leaf({1, 2, 4, 4}, rng);
  EXPECT_LT(check_gradients([&] { return feature_matching_loss({{real}}, {{fake}}); }, {fake}).max_rel_error, kTol);
  Var dr = random_leaf({1, 1, 3, 3}, rng), df = random_leaf({1, 1, 3, 3}, rng);
  EXPECT_LT(check_gradients([&] { return lsgan_d_loss({dr}, {df}); }, {dr, df}).max_rel_error, kTol);
  EXPECT_LT(check_gradients([&] { return lsgan_g_loss({df}); }, {df}).max_rel_error, kTol);
}

TEST(LossGradients, FeatureMatchingStopsAtRealActivations) {
  Rng rng(12);
  Var real = random_leaf({1, 2, 3, 3}, rng), fake = random_leaf({1, 2, 3, 3}, rng);
  feature_matching_loss({{real}}, {{fake}}).backward();
  EXPECT_FALSE(real.has_grad());
  EXPECT_TRUE(fake.has_grad());
}

TEST(Discriminator, PatchMapShapes) {
  DiscriminatorConfig cfg;
  cfg.in_channels = 3 + 17;
  MultiScaleDiscriminator d(cfg);
  Rng rng(13);
  d.init(rng);
  ShapeTrace trace;
  NoGradGuard ng;
  const auto acts = d(Var(random_tensor({1, 20, 256, 256}, rng)), &trace);
  ASSERT_EQ(acts.size(), 2u);
  std::map<std::string, Shape> got(trace.begin(), trace.end());
  EXPECT_EQ(got["scale0.conv0"], (Shape{1, 64, 128, 128}));
  EXPECT_EQ(got["scale0.conv1"], (Shape{1, 128, 64, 64}));
  EXPECT_EQ(got["scale0.conv2"], (Shape{1, 256, 32, 32}));
  EXPECT_EQ(got["scale0.conv3"], (Shape{1, 512, 31, 31}));
  EXPECT_EQ(got["scale0.conv4"], (Shape{1, 1, 30, 30}));
  EXPECT_EQ(got["scale1.input"], (Shape{1, 20, 128, 128}));
  EXPECT_EQ(got["scale1.conv4"], (Shape{1, 1, 14, 14}));
  EXPECT_EQ(patch_maps(acts)[0].shape(), (Shape{1, 1, 30, 30}));
}

TEST(Discriminator, SpectralNormBoundsSingularValue) {
  DiscriminatorConfig cfg;
  cfg.in_channels = 5;
  cfg.widths = {8, 16, 16, 32};
  cfg.num_scales = 1;
  MultiScaleDiscriminator d(cfg);
  Rng rng(14);
  d.init(rng);
  for (auto& layer : d.scales[0].layers) {
    layer.power_iteration(200);
    const Tensor w = layer.normalized_weight();
    const int64_t rows = w.dim(0), cols = w.numel() / rows;
    Eigen::MatrixXd m(rows, cols);
    for (int64_t i = 0; i < rows; ++i)
      for (int64_t j = 0; j < cols; ++j) m(i, j) = w[i * cols + j];
    Eigen::JacobiSVD<Eigen::MatrixXd> svd(m);
    EXPECT_LE(svd.singularValues()(0), 1.0 + 1e-3);
    EXPECT_GE(svd.singularValues()(0), 1.0 - 1e-3);
  }
}

TEST(Totals, WeightedSums) {
  LossWeights w;
  LossBundle zero = unit_bundle(0.0);
  total_losses(zero, w);
  EXPECT_EQ(zero.g_total, 0.0);
  EXPECT_EQ(zero.d_total, 0.0);
  LossBundle unit = unit_bundle(1.0);
  total_losses(unit, w);
  EXPECT_DOUBLE_EQ(unit.g_total, 291.0);
  EXPECT_DOUBLE_EQ(unit.d_total, 1.0);
  LossWeights w2 = w;
  w2.style *= 2;
  LossBundle doubled = unit_bundle(1.0);
  total_losses(doubled, w2);
  EXPECT_DOUBLE_EQ(doubled.g_total - unit.g_total, 250.0);
  LossBundle missing = unit_bundle(1.0);
  missing.terms.erase("perceptual");
  EXPECT_THROW(total_losses(missing, w), LossError);
}

TEST(Totals, LinearInEachTerm) {
  LossWeights w;
  const std::map<std::string, double> lambda{{"adv_G", w.adv},   {"pixel_rec", w.rec}, {"perceptual", w.perc},
                                             {"style", w.style}, {"feature_match", w.fm}, {"seg_ms", w.cross}};
  for (const auto& [name, lam] : lambda) {
    LossBundle a = unit_bundle(0.3), b = unit_bundle(0.3);
    b.terms[name] += 1.7;
    total_losses(a, w);
    total_losses(b, w);
    EXPECT_NEAR(b.g_total - a.g_total, 1.7 * lam, 1e-9) << name;
    std::map<std::string, Var> vars;
    for (const auto& [k, v] : b.terms) vars[k] = Var(Tensor::scalar(v));
    EXPECT_NEAR(weighted_generator_total(vars, w).item(), b.g_total, 1e-9);
  }
}

TEST(Extractor, StubIsDeterministicWithFourTaps) {
  Rng rng(15);
  const Tensor x = random_tensor({2, 3, 16, 16}, rng);
  StubExtractor a, b;
  const auto ta = a.features(Var(x)), tb = b.features(Var(x));
  ASSERT_EQ(ta.size(), 4u);
  for (size_t i = 0; i < 4; ++i) EXPECT_EQ(ta[i].value().storage(), tb[i].value().storage());
  EXPECT_EQ(a.embed(x).shape(), (Shape{2, 8 + 16 + 16 + 32}));
}
