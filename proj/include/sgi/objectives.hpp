#pragma once

#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "sgi/layers.hpp"
#include "sgi/shape_net.hpp"

namespace sgi::obj {

using shape::ShapeTrace;

class LossError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DiscriminatorConfig {
  int in_channels = 3 + 17;
  std::vector<int> widths{64, 128, 256, 512};
  int num_scales = 2;
  bool spectral_norm = true;
  double init_std = 0.02;
};

/// K4 PatchGAN: three stride-2 stages, one stride-1 stage, then a 1-channel map.
class PatchDiscriminator {
 public:
  PatchDiscriminator() = default;
  explicit PatchDiscriminator(const DiscriminatorConfig& cfg);
  /// Activations of every layer; the last entry is the patch map.
  std::vector<Var> operator()(const Var& x, ShapeTrace* trace = nullptr);
  void init(Rng& rng, double std);
  void visit(nn::Registry& r);
  std::vector<nn::SNConv2d> layers;
  bool spectral_norm = true;
};

class MultiScaleDiscriminator {
 public:
  MultiScaleDiscriminator() = default;
  explicit MultiScaleDiscriminator(const DiscriminatorConfig& cfg);
  /// Per scale, the activations of each layer. Scale k sees the input average-pooled k times.
  std::vector<std::vector<Var>> operator()(const Var& x, ShapeTrace* trace = nullptr);
  void init(Rng& rng);
  void visit(nn::Registry& r);
  /// Toggles the per-forward power iteration (off for finite-difference checks).
  void set_update_estimate(bool on);
  DiscriminatorConfig cfg;
  std::vector<PatchDiscriminator> scales;
};

/// Fixed feature network whose taps feed the perceptual and style losses.
class FeatureExtractor {
 public:
  virtual ~FeatureExtractor() = default;
  virtual std::vector<Var> features(const Var& x) const = 0;
  virtual std::string name() const = 0;
  /// Per-image descriptor (spatial means of every tap), (N, d).
  Tensor embed(const Tensor& x) const;
};

/// Four conv + ReLU stages with seed-pinned random weights, average-pooled between taps.
class StubExtractor : public FeatureExtractor {
 public:
  explicit StubExtractor(uint64_t seed = 1234, std::vector<int> widths = {8, 16, 16, 32});
  std::vector<Var> features(const Var& x) const override;
  std::string name() const override { return "stub"; }

 private:
  std::vector<nn::Conv2d> convs_;
};

/// Single tap that returns its input.
class IdentityExtractor : public FeatureExtractor {
 public:
  std::vector<Var> features(const Var& x) const override { return {x}; }
  std::string name() const override { return "identity"; }
};

/// Mean over pixels and scales of -sum_c gt_c log(p_c + eps); coarse maps are
/// bilinearly upsampled and renormalized first.
Var seg_multiscale_loss(const std::vector<Var>& scale_segs, const Var& s_gt, double eps = 1e-8);
/// L1 over all pixels divided by 3 * hole pixel count, averaged over the batch.
Var pixel_rec_loss(const Var& x_filled, const Var& x_gt, const Tensor& m);
/// sum_k sum_i mean|real - fake| / K over the given activations (callers drop the patch maps).
Var feature_matching_loss(const std::vector<std::vector<Var>>& real, const std::vector<std::vector<Var>>& fake);
Var perceptual_loss(const Var& x_filled, const Var& x_gt, const FeatureExtractor& fx);
/// sum_j of the entrywise L1 distance of Gram matrices, averaged over the batch.
Var style_loss(const Var& x_filled, const Var& x_gt, const FeatureExtractor& fx);

/// Least squares, real -> 1, fake -> 0, each scale averaged then summed over scales.
Var lsgan_d_loss(const std::vector<Var>& real_maps, const std::vector<Var>& fake_maps);
Var lsgan_g_loss(const std::vector<Var>& fake_maps);

/// Last activation of each scale.
std::vector<Var> patch_maps(const std::vector<std::vector<Var>>& acts);

struct LossWeights {
  double rec = 10.0;
  double perc = 10.0;
  double fm = 10.0;
  double cross = 10.0;  // multi-scale segmentation
  double style = 250.0;
  double adv = 1.0;
  double vae = 5.0;
  double inst_rec = 20.0;
  double shape_adv = 1.0;
};

inline const std::vector<std::string> kGeneratorTerms{"adv_G", "pixel_rec", "perceptual", "style", "feature_match",
                                                      "seg_ms"};
inline const std::vector<std::string> kShapeTerms{"shape_vae", "shape_rec", "shape_adv_G"};

struct LossBundle {
  std::map<std::string, double> terms;
  double g_total = 0.0;
  double d_total = 0.0;
};

/// G_total = adv_G + rec*pixel_rec + perc*perceptual + style*style + fm*feature_match + cross*seg_ms,
/// D_total = adv_D. Throws LossError on a missing term.
void total_losses(LossBundle& bundle, const LossWeights& w);
/// Differentiable counterpart for the generator update.
Var weighted_generator_total(const std::map<std::string, Var>& terms, const LossWeights& w);
/// vae * shape_vae + inst_rec * shape_rec + shape_adv * shape_adv_G.
Var weighted_shape_total(const std::map<std::string, Var>& terms, const LossWeights& w);

}  // namespace sgi::obj
