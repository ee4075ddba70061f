#pragma once

#include <string>
#include <utility>
#include <vector>

#include "sgi/layers.hpp"
#include "sgi/masking.hpp"

namespace sgi::shape {

/// Named intermediate shapes recorded during a forward pass.
using ShapeTrace = std::vector<std::pair<std::string, Shape>>;

struct ShapeNetConfig {
  int latent_dim = 64;
  int num_classes = 2;
  int theta_dim = 6;
  int canonical_size = 64;
  int fc_channels = 8;  // FC output is reshaped to (fc_channels, canonical/2, canonical/2)
  int enc_width = 32;   // doubles per downsampling stage
  int gen_width = 256;  // halves per upsampling stage
  int disc_width = 64;  // doubles per stage
  double init_std = 0.02;

  int input_dim() const { return canonical_size * canonical_size + num_classes + theta_dim; }
  int condition_dim() const { return num_classes + theta_dim; }
  /// Throws std::invalid_argument for sizes that do not compose.
  void validate() const;
};

struct LatentPosterior {
  Var mu;      // (N, Z)
  Var logvar;  // (N, Z)
};

class ShapeEncoder {
 public:
  ShapeEncoder() = default;
  explicit ShapeEncoder(const ShapeNetConfig& cfg);
  /// input (N, input_dim): flatten(m_s) ++ c ++ theta features.
  LatentPosterior operator()(const Var& input, ShapeTrace* trace = nullptr) const;
  void init(Rng& rng);
  void visit(nn::Registry& r);
  ShapeNetConfig cfg;
  nn::Linear fc;
  nn::Conv2d stem;
  std::vector<nn::Conv2d> down;
  nn::Conv2d mu_head, logvar_head;
};

class ShapeGenerator {
 public:
  ShapeGenerator() = default;
  explicit ShapeGenerator(const ShapeNetConfig& cfg);
  /// z (N, Z), condition (N, D + 6) -> (N, 1, canonical, canonical) in (0, 1).
  Var operator()(const Var& z, const Var& condition, ShapeTrace* trace = nullptr) const;
  void init(Rng& rng);
  void visit(nn::Registry& r);
  ShapeNetConfig cfg;
  std::vector<nn::ConvTranspose2d> ups;
};

class ShapeDiscriminator {
 public:
  ShapeDiscriminator() = default;
  explicit ShapeDiscriminator(const ShapeNetConfig& cfg);
  /// (N, 1, canonical, canonical) -> (N, 1) scores.
  Var operator()(const Var& m, ShapeTrace* trace = nullptr) const;
  void init(Rng& rng);
  void visit(nn::Registry& r);
  ShapeNetConfig cfg;
  std::vector<nn::Conv2d> convs;
};

/// Stacks shape_input_vector rows into (N, input_dim).
Tensor shape_inputs(const std::vector<mask::InstanceSpec>& specs, int image_size = mask::kImageSize);
/// Stacks one_hot(c) ++ theta features into (N, D + 6).
Tensor shape_conditions(const std::vector<mask::InstanceSpec>& specs, int image_size = mask::kImageSize);
Tensor shape_condition(data::ObjectClass cls, const nn::Affine& theta, int canonical, int image_size = mask::kImageSize);
/// Stacks the canonical masks into (N, 1, c, c).
Tensor canonical_masks(const std::vector<mask::InstanceSpec>& specs);

/// z = mu + exp(logvar / 2) * eps with eps ~ N(0, I) drawn from rng.
Var sample_latent(const LatentPosterior& post, Rng& rng);
/// Same, with an explicit noise tensor.
Var reparameterize(const LatentPosterior& post, const Tensor& eps);

/// Inverse-warp of m_hat onto a canvas, thresholded to {0, 1}.
Tensor place_shape(const Tensor& m_hat, const std::vector<nn::Affine>& thetas, int height, int width,
                   double threshold = 0.5);

struct ShapeLosses {
  Var vae;  // KL(q || N(0, I)), summed over latent dims, averaged over the batch
  Var rec;  // mean |m_s - m_hat|
};
ShapeLosses shape_losses(const Var& m_s, const Var& m_hat, const LatentPosterior& post);

struct AdversarialPair {
  Var d_loss;
  Var g_loss;
};
/// Least-squares objective with real -> 1, fake -> 0; inputs (N, 1), averaged over N.
AdversarialPair shape_adversarial(const Var& d_real, const Var& d_fake);

}  // namespace sgi::shape
