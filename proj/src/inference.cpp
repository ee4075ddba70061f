#include "sgi/inference.hpp"

#include <algorithm>
#include <cmath>

namespace sgi::infer {

using namespace sgi::nn;

Inpainting inpaint(train::Models& models, const Tensor& image, const Tensor& seg_onehot, const Tensor& m,
                   const Tensor& instance) {
  const int64_t h = image.dim(2), w = image.dim(3);
  if (h % 16 != 0 || w % 16 != 0)
    throw InferenceError("image size " + std::to_string(h) + "x" + std::to_string(w) + " is not a multiple of 16");
  require_shape(m, {1, 1, h, w}, "keep-mask");
  require_shape(instance, {1, 1, h, w}, "instance channel");
  const int64_t c = models.g.cfg.num_classes;
  require_shape(seg_onehot, {1, c, h, w}, "segmentation");
  const int64_t hw = h * w;

  Tensor x_in = image;
  for (int64_t ch = 0; ch < 3; ++ch)
    for (int64_t j = 0; j < hw; ++j) x_in[ch * hw + j] = (2.0 * image[ch * hw + j] - 1.0) * m[j];
  Tensor s_bl = seg_onehot;
  for (int64_t ch = 0; ch < c; ++ch)
    for (int64_t j = 0; j < hw; ++j) s_bl[ch * hw + j] *= m[j];

  NoGradGuard guard;
  const auto out = models.g(Var(x_in), Var(m), Var(s_bl), Var(instance));
  Inpainting r;
  r.raw = out.x_filled.value();
  for (auto& v : r.raw.values()) v = std::clamp(0.5 * (v + 1.0), 0.0, 1.0);
  r.composite = r.raw;
  for (int64_t ch = 0; ch < 3; ++ch)
    for (int64_t j = 0; j < hw; ++j)
      if (m[j] >= 0.5) r.composite[ch * hw + j] = image[ch * hw + j];
  r.seg = out.s_filled.value();
  r.labels.assign(static_cast<size_t>(hw), 0);
  for (int64_t j = 0; j < hw; ++j) {
    int64_t best = 0;
    for (int64_t ch = 1; ch < c; ++ch)
      if (r.seg[ch * hw + j] > r.seg[best * hw + j]) best = ch;
    r.labels[static_cast<size_t>(j)] = static_cast<int32_t>(best);
  }
  return r;
}

Tensor generate_instance(train::Models& models, data::ObjectClass cls, const Affine& theta, int height, int width,
                         Rng& rng) {
  NoGradGuard guard;
  const auto& sc = models.gs.cfg;
  Tensor z({1, sc.latent_dim});
  for (auto& v : z.values()) v = normal(rng);
  const Tensor cond = shape::shape_condition(cls, theta, sc.canonical_size, height);
  const Var m_hat = models.gs(Var(z), Var(cond));
  return shape::place_shape(m_hat.value(), {theta}, height, width);
}

std::optional<data::BBox> hole_bbox(const Tensor& m) {
  const int64_t h = m.dim(2), w = m.dim(3);
  int x0 = static_cast<int>(w), y0 = static_cast<int>(h), x1 = -1, y1 = -1;
  for (int64_t y = 0; y < h; ++y)
    for (int64_t x = 0; x < w; ++x)
      if (m[y * w + x] < 0.5) {
        x0 = std::min(x0, static_cast<int>(x));
        y0 = std::min(y0, static_cast<int>(y));
        x1 = std::max(x1, static_cast<int>(x));
        y1 = std::max(y1, static_cast<int>(y));
      }
  if (x1 < 0) return std::nullopt;
  return data::BBox{x0, y0, x1 - x0 + 1, y1 - y0 + 1};
}

data::BBox sample_location(const train::LocationPrior& prior, data::ObjectClass cls, const data::BBox& hole,
                           int height, int width, Rng& rng) {
  const auto& all = prior.samples[static_cast<int>(cls)];
  auto to_box = [&](const std::array<double, 4>& l) {
    const int bw = std::max(1, static_cast<int>(std::lround(l[2] * width)));
    const int bh = std::max(1, static_cast<int>(std::lround(l[3] * height)));
    const int cx = static_cast<int>(std::lround(l[0] * width)), cy = static_cast<int>(std::lround(l[1] * height));
    return data::BBox{cx - bw / 2, cy - bh / 2, bw, bh};
  };
  auto inside = [&](const data::BBox& b) {
    return b.x >= hole.x && b.y >= hole.y && b.x + b.w <= hole.x + hole.w && b.y + b.h <= hole.y + hole.h;
  };
  std::vector<data::BBox> fitting;
  for (const auto& l : all) {
    const auto b = to_box(l);
    if (inside(b)) fitting.push_back(b);
  }
  if (!fitting.empty()) return fitting[static_cast<size_t>(uniform_int(rng, 0, static_cast<int>(fitting.size()) - 1))];
  if (all.empty()) return hole;
  // shrink a prior sample (keeping its aspect) into the hole and centre it there
  auto b = to_box(all[static_cast<size_t>(uniform_int(rng, 0, static_cast<int>(all.size()) - 1))]);
  const double s = std::min({1.0, static_cast<double>(hole.w) / b.w, static_cast<double>(hole.h) / b.h});
  b.w = std::clamp(static_cast<int>(std::floor(b.w * s)), 1, hole.w);
  b.h = std::clamp(static_cast<int>(std::floor(b.h * s)), 1, hole.h);
  b.x = hole.x + (hole.w - b.w) / 2;
  b.y = hole.y + (hole.h - b.h) / 2;
  return b;
}

}  // namespace sgi::infer
