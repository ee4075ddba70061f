#include "sgi/objectives.hpp"

#include <cmath>

namespace sgi::obj {

using namespace sgi::nn;

namespace {

void record(ShapeTrace* trace, const std::string& name, const Var& v) {
  if (trace) trace->emplace_back(name, v.shape());
}

double numel_of(const Var& v) { return static_cast<double>(v.value().numel()); }

}  // namespace

PatchDiscriminator::PatchDiscriminator(const DiscriminatorConfig& cfg) : spectral_norm(cfg.spectral_norm) {
  if (cfg.widths.size() != 4) throw std::invalid_argument("discriminator needs four widths");
  int in = cfg.in_channels;
  for (size_t i = 0; i < cfg.widths.size(); ++i) {
    const int stride = i < 3 ? 2 : 1;
    layers.emplace_back(in, cfg.widths[i], 4, ConvOptions{stride, 1, 1});
    in = cfg.widths[i];
  }
  layers.emplace_back(in, 1, 4, ConvOptions{1, 1, 1});
}

std::vector<Var> PatchDiscriminator::operator()(const Var& x, ShapeTrace* trace) {
  std::vector<Var> acts;
  Var h = x;
  for (size_t i = 0; i < layers.size(); ++i) {
    h = spectral_norm ? layers[i](h) : layers[i].conv(h);
    if (i + 1 < layers.size()) {
      if (i > 0) h = instance_norm(h);
      h = leaky_relu(h, 0.2);
    }
    record(trace, "conv" + std::to_string(i), h);
    acts.push_back(h);
  }
  return acts;
}

void PatchDiscriminator::init(Rng& rng, double std) {
  for (auto& l : layers) l.init(rng, {std});
}

void PatchDiscriminator::visit(nn::Registry& r) {
  for (size_t i = 0; i < layers.size(); ++i) r.child("conv" + std::to_string(i), layers[i]);
}

MultiScaleDiscriminator::MultiScaleDiscriminator(const DiscriminatorConfig& c) : cfg(c) {
  if (cfg.num_scales < 1) throw std::invalid_argument("discriminator needs at least one scale");
  for (int k = 0; k < cfg.num_scales; ++k) scales.emplace_back(cfg);
}

std::vector<std::vector<Var>> MultiScaleDiscriminator::operator()(const Var& x, ShapeTrace* trace) {
  std::vector<std::vector<Var>> out;
  Var h = x;
  for (size_t k = 0; k < scales.size(); ++k) {
    if (k > 0) h = avg_pool2d(h, 3, 2, 1);
    ShapeTrace local;
    out.push_back(scales[k](h, trace ? &local : nullptr));
    if (trace) {
      trace->emplace_back("scale" + std::to_string(k) + ".input", h.shape());
      for (auto& [name, shape] : local) trace->emplace_back("scale" + std::to_string(k) + "." + name, shape);
    }
  }
  return out;
}

void MultiScaleDiscriminator::init(Rng& rng) {
  for (auto& s : scales) s.init(rng, cfg.init_std);
}

void MultiScaleDiscriminator::visit(nn::Registry& r) {
  for (size_t k = 0; k < scales.size(); ++k) r.child("scale" + std::to_string(k), scales[k]);
}

void MultiScaleDiscriminator::set_update_estimate(bool on) {
  for (auto& s : scales)
    for (auto& l : s.layers) l.update_estimate = on;
}

Tensor FeatureExtractor::embed(const Tensor& x) const {
  NoGradGuard guard;
  const auto taps = features(Var(x));
  const int64_t n = x.dim(0);
  int64_t d = 0;
  for (const auto& t : taps) d += t.dim(1);
  Tensor out({n, d});
  int64_t offset = 0;
  for (const auto& t : taps) {
    const Tensor& v = t.value();
    const int64_t c = v.dim(1), hw = v.dim(2) * v.dim(3);
    for (int64_t i = 0; i < n; ++i)
      for (int64_t ch = 0; ch < c; ++ch) {
        double s = 0.0;
        const double* p = v.data() + (i * c + ch) * hw;
        for (int64_t j = 0; j < hw; ++j) s += p[j];
        out[i * d + offset + ch] = s / static_cast<double>(hw);
      }
    offset += c;
  }
  return out;
}

StubExtractor::StubExtractor(uint64_t seed, std::vector<int> widths) {
  Rng rng = split_rng(seed, "stub-extractor");
  int in = 3;
  for (int w : widths) {
    Conv2d c(in, w, 3, ConvOptions{1, 1, 1});
    // He-style scale keeps activations O(1) through the stack.
    c.init(rng, {std::sqrt(2.0 / (9.0 * in))});
    convs_.push_back(c);
    in = w;
  }
}

std::vector<Var> StubExtractor::features(const Var& x) const {
  std::vector<Var> taps;
  Var h = x;
  for (size_t i = 0; i < convs_.size(); ++i) {
    if (i > 0) h = avg_pool2d(h, 2, 2, 0);
    h = relu(convs_[i](h));
    taps.push_back(h);
  }
  return taps;
}

Var seg_multiscale_loss(const std::vector<Var>& scale_segs, const Var& s_gt, double eps) {
  if (scale_segs.empty()) throw LossError("seg_multiscale_loss: no scales");
  const int64_t n = s_gt.dim(0), c = s_gt.dim(1), h = s_gt.dim(2), w = s_gt.dim(3);
  const double pixels = static_cast<double>(n * h * w);
  // Offset by log(1 + eps) so a perfect prediction scores exactly 0.
  const double offset = std::log1p(eps);
  Var total;
  for (const auto& p : scale_segs) {
    if (p.dim(0) != n || p.dim(1) != c) throw LossError("seg_multiscale_loss: channel or batch mismatch");
    Var q = p;
    if (p.dim(2) != h || p.dim(3) != w) {
      q = upsample_bilinear(p, static_cast<int>(h), static_cast<int>(w));
      q = div_bcast(q, sum_channels(q));
    }
    Var ce = scale(sum(mul(s_gt, add_scalar(log(q, eps), -offset))), -1.0 / pixels);
    total = total.defined() ? add(total, ce) : ce;
  }
  return scale(total, 1.0 / static_cast<double>(scale_segs.size()));
}

Var pixel_rec_loss(const Var& x_filled, const Var& x_gt, const Tensor& m) {
  if (x_filled.shape() != x_gt.shape()) throw LossError("pixel_rec_loss: shape mismatch");
  const int64_t n = x_gt.dim(0), c = x_gt.dim(1), hw = x_gt.dim(2) * x_gt.dim(3);
  if (m.dim(0) != n || m.dim(2) * m.dim(3) != hw) throw LossError("pixel_rec_loss: mask shape mismatch");
  Var diff = abs(sub(x_filled, x_gt));
  Var total;
  for (int64_t i = 0; i < n; ++i) {
    double holes = 0.0;
    for (int64_t j = 0; j < hw; ++j) holes += 1.0 - m[i * hw + j];
    if (holes <= 0.0) throw LossError("pixel_rec_loss: mask has no hole pixels");
    Var term = scale(sum(slice_batch(diff, i, 1)), 1.0 / (static_cast<double>(c) * holes));
    total = total.defined() ? add(total, term) : term;
  }
  return scale(total, 1.0 / static_cast<double>(n));
}

Var feature_matching_loss(const std::vector<std::vector<Var>>& real, const std::vector<std::vector<Var>>& fake) {
  if (real.size() != fake.size() || real.empty()) throw LossError("feature_matching_loss: misaligned scales");
  Var total;
  for (size_t k = 0; k < real.size(); ++k) {
    if (real[k].size() != fake[k].size()) throw LossError("feature_matching_loss: misaligned layers");
    for (size_t i = 0; i < real[k].size(); ++i) {
      if (real[k][i].shape() != fake[k][i].shape()) throw LossError("feature_matching_loss: activation shape mismatch");
      Var t = scale(sum(abs(sub(fake[k][i], real[k][i].detach()))), 1.0 / numel_of(fake[k][i]));
      total = total.defined() ? add(total, t) : t;
    }
  }
  if (!total.defined()) return Var(Tensor::scalar(0.0));
  return scale(total, 1.0 / static_cast<double>(real.size()));
}

namespace {

std::vector<Var> taps_of(const FeatureExtractor& fx, const Var& x) {
  auto taps = fx.features(x);
  if (taps.empty()) throw LossError("feature extractor returned no taps");
  return taps;
}

}  // namespace

Var perceptual_loss(const Var& x_filled, const Var& x_gt, const FeatureExtractor& fx) {
  const auto a = taps_of(fx, x_filled);
  const auto b = taps_of(fx, x_gt);
  Var total;
  for (size_t i = 0; i < a.size(); ++i) {
    Var t = scale(sum(abs(sub(a[i], b[i]))), 1.0 / numel_of(a[i]));
    total = total.defined() ? add(total, t) : t;
  }
  return total;
}

Var style_loss(const Var& x_filled, const Var& x_gt, const FeatureExtractor& fx) {
  const auto a = taps_of(fx, x_filled);
  const auto b = taps_of(fx, x_gt);
  const double n = static_cast<double>(x_gt.dim(0));
  Var total;
  for (size_t j = 0; j < a.size(); ++j) {
    Var t = scale(sum(abs(sub(gram(a[j]), gram(b[j])))), 1.0 / n);
    total = total.defined() ? add(total, t) : t;
  }
  return total;
}

Var lsgan_d_loss(const std::vector<Var>& real_maps, const std::vector<Var>& fake_maps) {
  if (real_maps.size() != fake_maps.size() || real_maps.empty()) throw LossError("lsgan: scale mismatch");
  Var total;
  for (size_t k = 0; k < real_maps.size(); ++k) {
    Var r = scale(sum(square(add_scalar(real_maps[k], -1.0))), 0.5 / numel_of(real_maps[k]));
    Var f = scale(sum(square(fake_maps[k])), 0.5 / numel_of(fake_maps[k]));
    Var t = add(r, f);
    total = total.defined() ? add(total, t) : t;
  }
  return total;
}

Var lsgan_g_loss(const std::vector<Var>& fake_maps) {
  if (fake_maps.empty()) throw LossError("lsgan: scale mismatch");
  Var total;
  for (const auto& f : fake_maps) {
    Var t = scale(sum(square(add_scalar(f, -1.0))), 0.5 / numel_of(f));
    total = total.defined() ? add(total, t) : t;
  }
  return total;
}

std::vector<Var> patch_maps(const std::vector<std::vector<Var>>& acts) {
  std::vector<Var> out;
  for (const auto& a : acts) out.push_back(a.back());
  return out;
}

namespace {

template <class T>
const T& require_term(const std::map<std::string, T>& terms, const std::string& name) {
  auto it = terms.find(name);
  if (it == terms.end()) throw LossError("missing loss term: " + name);
  return it->second;
}

}  // namespace

void total_losses(LossBundle& b, const LossWeights& w) {
  const auto& t = b.terms;
  b.g_total = w.adv * require_term(t, "adv_G") + w.rec * require_term(t, "pixel_rec") +
              w.perc * require_term(t, "perceptual") + w.style * require_term(t, "style") +
              w.fm * require_term(t, "feature_match") + w.cross * require_term(t, "seg_ms");
  b.d_total = require_term(t, "adv_D");
}

Var weighted_generator_total(const std::map<std::string, Var>& t, const LossWeights& w) {
  Var g = scale(require_term(t, "adv_G"), w.adv);
  g = add(g, scale(require_term(t, "pixel_rec"), w.rec));
  g = add(g, scale(require_term(t, "perceptual"), w.perc));
  g = add(g, scale(require_term(t, "style"), w.style));
  g = add(g, scale(require_term(t, "feature_match"), w.fm));
  g = add(g, scale(require_term(t, "seg_ms"), w.cross));
  return g;
}

Var weighted_shape_total(const std::map<std::string, Var>& t, const LossWeights& w) {
  Var g = scale(require_term(t, "shape_vae"), w.vae);
  g = add(g, scale(require_term(t, "shape_rec"), w.inst_rec));
  g = add(g, scale(require_term(t, "shape_adv_G"), w.shape_adv));
  return g;
}

}  // namespace sgi::obj
