#include "sgi/shape_net.hpp"

#include <stdexcept>

namespace sgi::shape {

using namespace sgi::nn;

namespace {

int log2_exact(int v) {
  int k = 0;
  while ((1 << k) < v) ++k;
  return (1 << k) == v ? k : -1;
}

void record(ShapeTrace* trace, const std::string& name, const Var& v) {
  if (trace) trace->emplace_back(name, v.shape());
}

}  // namespace

void ShapeNetConfig::validate() const {
  const int k = log2_exact(canonical_size);
  if (k < 4) throw std::invalid_argument("canonical_size must be a power of two >= 16");
  if (latent_dim <= 0 || num_classes <= 0 || theta_dim <= 0 || fc_channels <= 0 || enc_width <= 0 || gen_width <= 0 ||
      disc_width <= 0)
    throw std::invalid_argument("shape network widths must be positive");
  if (gen_width >> (k - 3) <= 0) throw std::invalid_argument("gen_width too small for canonical_size");
}

ShapeEncoder::ShapeEncoder(const ShapeNetConfig& c) : cfg(c) {
  cfg.validate();
  const int half = cfg.canonical_size / 2;
  fc = Linear(cfg.input_dim(), cfg.fc_channels * half * half);
  stem = Conv2d(cfg.fc_channels, cfg.enc_width, 3, {1, 1, 1});
  int w = cfg.enc_width;
  for (int res = half; res > 4; res /= 2) {
    down.emplace_back(w, 2 * w, 4, ConvOptions{2, 1, 1});
    w *= 2;
  }
  mu_head = Conv2d(w, cfg.latent_dim, 4);
  logvar_head = Conv2d(w, cfg.latent_dim, 4);
}

LatentPosterior ShapeEncoder::operator()(const Var& input, ShapeTrace* trace) const {
  if (input.value().rank() != 2 || input.dim(1) != cfg.input_dim())
    throw ShapeError("shape encoder expects (N, " + std::to_string(cfg.input_dim()) + "), got " +
                     shape_str(input.shape()));
  const int64_t n = input.dim(0);
  const int half = cfg.canonical_size / 2;
  record(trace, "input", input);
  Var h = leaky_relu(fc(input), 0.2);
  record(trace, "fc", h);
  h = reshape(h, {n, cfg.fc_channels, half, half});
  record(trace, "reshape", h);
  h = leaky_relu(instance_norm(stem(h)), 0.2);
  record(trace, "stem", h);
  for (size_t i = 0; i < down.size(); ++i) {
    h = leaky_relu(instance_norm(down[i](h)), 0.2);
    record(trace, "down" + std::to_string(i), h);
  }
  LatentPosterior post{reshape(mu_head(h), {n, cfg.latent_dim}), reshape(logvar_head(h), {n, cfg.latent_dim})};
  record(trace, "mu", post.mu);
  record(trace, "logvar", post.logvar);
  return post;
}

void ShapeEncoder::init(Rng& rng) {
  const InitOptions o{cfg.init_std};
  fc.init(rng, o);
  stem.init(rng, o);
  for (auto& c : down) c.init(rng, o);
  mu_head.init(rng, o);
  logvar_head.init(rng, o);
}

void ShapeEncoder::visit(Registry& r) {
  r.child("fc", fc);
  r.child("stem", stem);
  for (size_t i = 0; i < down.size(); ++i) r.child("down" + std::to_string(i), down[i]);
  r.child("mu", mu_head);
  r.child("logvar", logvar_head);
}

ShapeGenerator::ShapeGenerator(const ShapeNetConfig& c) : cfg(c) {
  cfg.validate();
  int w = cfg.gen_width;
  ups.emplace_back(cfg.latent_dim + cfg.condition_dim(), w, 4, 1, 0);
  for (int res = 4; res < cfg.canonical_size / 2; res *= 2) {
    ups.emplace_back(w, w / 2, 4, 2, 1);
    w /= 2;
  }
  ups.emplace_back(w, 1, 4, 2, 1);
}

Var ShapeGenerator::operator()(const Var& z, const Var& condition, ShapeTrace* trace) const {
  if (z.value().rank() != 2 || z.dim(1) != cfg.latent_dim)
    throw ShapeError("shape generator expects z of width " + std::to_string(cfg.latent_dim) + ", got " +
                     shape_str(z.shape()));
  if (condition.value().rank() != 2 || condition.dim(1) != cfg.condition_dim() || condition.dim(0) != z.dim(0))
    throw ShapeError("shape generator condition must be (N, " + std::to_string(cfg.condition_dim()) + "), got " +
                     shape_str(condition.shape()));
  const int64_t n = z.dim(0);
  Var h = concat_channels({reshape(z, {n, cfg.latent_dim, 1, 1}), reshape(condition, {n, cfg.condition_dim(), 1, 1})});
  record(trace, "input", h);
  for (size_t i = 0; i + 1 < ups.size(); ++i) {
    h = relu(instance_norm(ups[i](h)));
    record(trace, "up" + std::to_string(i), h);
  }
  h = sigmoid(ups.back()(h));
  record(trace, "out", h);
  return h;
}

void ShapeGenerator::init(Rng& rng) {
  for (auto& u : ups) u.init(rng, {cfg.init_std});
}

void ShapeGenerator::visit(Registry& r) {
  for (size_t i = 0; i < ups.size(); ++i) r.child("up" + std::to_string(i), ups[i]);
}

ShapeDiscriminator::ShapeDiscriminator(const ShapeNetConfig& c) : cfg(c) {
  cfg.validate();
  int in = 1, w = cfg.disc_width;
  for (int res = cfg.canonical_size; res > 4; res /= 2) {
    convs.emplace_back(in, w, 4, ConvOptions{2, 1, 1});
    in = w;
    w *= 2;
  }
  convs.emplace_back(in, 1, 4);
}

Var ShapeDiscriminator::operator()(const Var& m, ShapeTrace* trace) const {
  require_shape(m.value(), {m.dim(0), 1, cfg.canonical_size, cfg.canonical_size}, "shape discriminator input");
  Var h = m;
  record(trace, "input", h);
  for (size_t i = 0; i + 1 < convs.size(); ++i) {
    h = convs[i](h);
    if (i > 0) h = instance_norm(h);
    h = leaky_relu(h, 0.2);
    record(trace, "conv" + std::to_string(i), h);
  }
  h = reshape(convs.back()(h), {m.dim(0), 1});
  record(trace, "out", h);
  return h;
}

void ShapeDiscriminator::init(Rng& rng) {
  for (auto& c : convs) c.init(rng, {cfg.init_std});
}

void ShapeDiscriminator::visit(Registry& r) {
  for (size_t i = 0; i < convs.size(); ++i) r.child("conv" + std::to_string(i), convs[i]);
}

Tensor shape_inputs(const std::vector<mask::InstanceSpec>& specs, int image_size) {
  if (specs.empty()) throw std::invalid_argument("shape_inputs: empty batch");
  std::vector<double> rows;
  int64_t width = 0;
  for (const auto& s : specs) {
    const auto v = mask::shape_input_vector(s, image_size);
    if (width == 0) width = static_cast<int64_t>(v.size());
    if (static_cast<int64_t>(v.size()) != width) throw ShapeError("shape_inputs: mixed canonical sizes");
    rows.insert(rows.end(), v.begin(), v.end());
  }
  return Tensor({static_cast<int64_t>(specs.size()), width}, std::move(rows));
}

Tensor shape_condition(data::ObjectClass cls, const nn::Affine& theta, int canonical, int image_size) {
  Tensor t({1, data::kNumObjectClasses + mask::kThetaDim});
  t[static_cast<int>(cls)] = 1.0;
  const auto f = mask::theta_features(theta, image_size, canonical);
  for (int i = 0; i < mask::kThetaDim; ++i) t[data::kNumObjectClasses + i] = f[static_cast<size_t>(i)];
  return t;
}

Tensor shape_conditions(const std::vector<mask::InstanceSpec>& specs, int image_size) {
  const int64_t d = data::kNumObjectClasses + mask::kThetaDim;
  Tensor t({static_cast<int64_t>(specs.size()), d});
  for (size_t i = 0; i < specs.size(); ++i) {
    const Tensor row =
        shape_condition(specs[i].cls, specs[i].theta, static_cast<int>(specs[i].m_s.dim(3)), image_size);
    for (int64_t j = 0; j < d; ++j) t[static_cast<int64_t>(i) * d + j] = row[j];
  }
  return t;
}

Tensor canonical_masks(const std::vector<mask::InstanceSpec>& specs) {
  if (specs.empty()) throw std::invalid_argument("canonical_masks: empty batch");
  const int64_t c = specs[0].m_s.dim(3);
  Tensor t({static_cast<int64_t>(specs.size()), 1, c, c});
  for (size_t i = 0; i < specs.size(); ++i) {
    require_shape(specs[i].m_s, {1, 1, c, c}, "canonical mask");
    std::copy(specs[i].m_s.data(), specs[i].m_s.data() + c * c, t.data() + static_cast<int64_t>(i) * c * c);
  }
  return t;
}

Var reparameterize(const LatentPosterior& post, const Tensor& eps) {
  require_shape(eps, post.mu.shape(), "latent noise");
  return add(post.mu, mul(exp(scale(post.logvar, 0.5)), Var(eps, false)));
}

Var sample_latent(const LatentPosterior& post, Rng& rng) {
  Tensor eps(post.mu.shape());
  for (auto& v : eps.values()) v = normal(rng);
  return reparameterize(post, eps);
}

Tensor place_shape(const Tensor& m_hat, const std::vector<nn::Affine>& thetas, int height, int width,
                   double threshold) {
  Tensor placed;
  {
    NoGradGuard guard;
    placed = place_canonical(Var(m_hat, false), thetas, height, width).value();
  }
  for (auto& v : placed.values()) v = v >= threshold ? 1.0 : 0.0;
  return placed;
}

ShapeLosses shape_losses(const Var& m_s, const Var& m_hat, const LatentPosterior& post) {
  require_shape(m_hat.value(), m_s.shape(), "shape reconstruction");
  require_shape(post.logvar.value(), post.mu.shape(), "latent posterior");
  const double n = static_cast<double>(post.mu.dim(0));
  const double nz = static_cast<double>(post.mu.value().numel());
  Var s = sum(sub(add(square(post.mu), exp(post.logvar)), post.logvar));
  ShapeLosses out;
  out.vae = scale(add_scalar(s, -nz), 0.5 / n);
  out.rec = mean(abs(sub(m_s, m_hat)));
  return out;
}

AdversarialPair shape_adversarial(const Var& d_real, const Var& d_fake) {
  AdversarialPair out;
  out.d_loss = add(scale(mean(square(add_scalar(d_real, -1.0))), 0.5), scale(mean(square(d_fake)), 0.5));
  out.g_loss = scale(mean(square(add_scalar(d_fake, -1.0))), 0.5);
  return out;
}

}  // namespace sgi::shape
