#include <algorithm>
#include <array>
#include <cmath>

#include "sgi/dataset.hpp"
#include "sgi/rng.hpp"

namespace sgi::data {

namespace {

// Raw Cityscapes label ids used by the synthetic scenes.
constexpr int kRoad = 7;
constexpr int kSidewalk = 8;
constexpr int kBuilding = 11;
constexpr int kPole = 17;
constexpr int kSign = 20;
constexpr int kVegetation = 21;
constexpr int kSky = 23;
constexpr int kPerson = 24;
constexpr int kCar = 26;

using Rgb = std::array<double, 3>;

class Canvas {
 public:
  Canvas(Scene& s) : s_(s) {}

  void put(int y, int x, const Rgb& c, int label, int instance = 0) {
    if (y < 0 || y >= s_.height || x < 0 || x >= s_.width) return;
    const size_t i = static_cast<size_t>(y) * s_.width + x;
    for (int k = 0; k < 3; ++k) s_.image[i * 3 + k] = std::round(std::clamp(c[k], 0.0, 1.0) * 255.0) / 255.0;
    s_.labels[i] = label;
    s_.instances[i] = instance;
  }

  void rect(int x0, int y0, int w, int h, const Rgb& c, int label, int instance = 0) {
    for (int y = y0; y < y0 + h; ++y)
      for (int x = x0; x < x0 + w; ++x) put(y, x, c, label, instance);
  }

  // Paints only pixels already owned by `instance`; keeps labels.
  void tint(int x0, int y0, int w, int h, const Rgb& c, int instance) {
    for (int y = y0; y < y0 + h; ++y)
      for (int x = x0; x < x0 + w; ++x) {
        if (y < 0 || y >= s_.height || x < 0 || x >= s_.width) continue;
        const size_t i = static_cast<size_t>(y) * s_.width + x;
        if (s_.instances[i] != instance) continue;
        put(y, x, c, s_.labels[i], instance);
      }
  }

  void ellipse(double cx, double cy, double rx, double ry, const Rgb& c, int label, int instance = 0) {
    for (int y = static_cast<int>(cy - ry); y <= static_cast<int>(cy + ry) + 1; ++y)
      for (int x = static_cast<int>(cx - rx); x <= static_cast<int>(cx + rx) + 1; ++x) {
        const double dx = (x + 0.5 - cx) / rx, dy = (y + 0.5 - cy) / ry;
        if (dx * dx + dy * dy <= 1.0) put(y, x, c, label, instance);
      }
  }

 private:
  Scene& s_;
};

Rgb jitter(Rng& rng, Rgb base, double amount) {
  for (auto& v : base) v = std::clamp(v + uniform_real(rng, -amount, amount), 0.0, 1.0);
  return base;
}

Rgb shade(const Rgb& c, double f) { return {c[0] * f, c[1] * f, c[2] * f}; }

void draw_car(Canvas& cv, Rng& rng, int x, int bottom, int w, int h, int instance) {
  static const std::array<Rgb, 5> kPaint{{{0.75, 0.12, 0.10}, {0.15, 0.25, 0.65}, {0.85, 0.85, 0.82},
                                          {0.10, 0.10, 0.12}, {0.55, 0.57, 0.60}}};
  const Rgb body = jitter(rng, kPaint[static_cast<size_t>(uniform_int(rng, 0, 4))], 0.05);
  const int body_h = h * 3 / 5;
  const int cabin_h = h - body_h;
  const int top = bottom - h;
  cv.rect(x, top + cabin_h, w, body_h, body, kCar, instance);
  // cabin narrows toward the roof
  for (int r = 0; r < cabin_h; ++r) {
    const int inset = w / 5 + (cabin_h - r) * w / (5 * std::max(cabin_h, 1));
    cv.rect(x + inset, top + r, w - 2 * inset, 1, body, kCar, instance);
  }
  const Rgb glass{0.55, 0.70, 0.80};
  const int gi = w / 5 + w / 10;
  cv.tint(x + gi, top + cabin_h / 3, w - 2 * gi, cabin_h - cabin_h / 3, glass, instance);
  const Rgb tyre{0.05, 0.05, 0.05};
  const double wr = std::max(4.0, h / 5.0);
  cv.ellipse(x + w * 0.22, bottom - wr * 0.6, wr, wr, tyre, kCar, instance);
  cv.ellipse(x + w * 0.78, bottom - wr * 0.6, wr, wr, tyre, kCar, instance);
  cv.tint(x, top + cabin_h + body_h / 3, w, 2, shade(body, 0.7), instance);
}

void draw_pedestrian(Canvas& cv, Rng& rng, int x, int bottom, int h, int instance) {
  const Rgb shirt = jitter(rng, {0.3, 0.4, 0.6}, 0.25);
  const Rgb trousers = jitter(rng, {0.2, 0.2, 0.25}, 0.1);
  const Rgb skin = jitter(rng, {0.85, 0.65, 0.5}, 0.08);
  const int w = std::max(10, h / 3);
  const int head = std::max(6, h / 6);
  const int torso = h * 2 / 5;
  const int legs = h - head - torso;
  const int top = bottom - h;
  cv.ellipse(x + w / 2.0, top + head / 2.0, head / 2.0, head / 2.0, skin, kPerson, instance);
  cv.rect(x, top + head, w, torso, shirt, kPerson, instance);
  cv.rect(x + 1, top + head + torso, w / 2 - 1, legs, trousers, kPerson, instance);
  cv.rect(x + w / 2 + 1, top + head + torso, w / 2 - 1, legs, trousers, kPerson, instance);
}

}  // namespace

Scene generate_fixture_scene(uint64_t seed, const std::string& id, Split split) {
  Rng rng = split_rng(seed, "fixture/" + id);
  Scene s;
  s.id = id;
  s.split = split;
  s.height = 256;
  s.width = 512;
  s.image.assign(static_cast<size_t>(s.height) * s.width * 3, 0.0);
  s.labels.assign(static_cast<size_t>(s.height) * s.width, 0);
  s.instances.assign(s.labels.size(), 0);
  Canvas cv(s);

  const int horizon = uniform_int(rng, 96, 120);
  const int kerb = horizon + uniform_int(rng, 14, 22);

  // sky: vertical gradient
  const Rgb sky_top = jitter(rng, {0.35, 0.55, 0.85}, 0.05);
  const Rgb sky_low = jitter(rng, {0.70, 0.82, 0.95}, 0.03);
  for (int y = 0; y < horizon; ++y) {
    const double t = static_cast<double>(y) / horizon;
    const Rgb c{sky_top[0] * (1 - t) + sky_low[0] * t, sky_top[1] * (1 - t) + sky_low[1] * t,
                sky_top[2] * (1 - t) + sky_low[2] * t};
    cv.rect(0, y, s.width, 1, c, kSky);
  }

  // building row
  static const std::array<Rgb, 4> kFacade{{{0.72, 0.62, 0.50}, {0.60, 0.58, 0.56}, {0.55, 0.38, 0.30},
                                           {0.80, 0.76, 0.66}}};
  for (int x = uniform_int(rng, -40, 0); x < s.width;) {
    const int w = uniform_int(rng, 60, 130);
    const int top = uniform_int(rng, 15, horizon - 30);
    const Rgb facade = jitter(rng, kFacade[static_cast<size_t>(uniform_int(rng, 0, 3))], 0.04);
    cv.rect(x, top, w, horizon - top, facade, kBuilding);
    const Rgb window = shade(facade, 0.55);
    for (int wy = top + 8; wy + 10 < horizon - 4; wy += 18)
      for (int wx = x + 8; wx + 8 < x + w - 4; wx += 16) cv.rect(wx, wy, 8, 10, window, kBuilding);
    x += w;
  }

  // trees in front of the facades
  const int trees = uniform_int(rng, 1, 3);
  for (int t = 0; t < trees; ++t) {
    const double cx = uniform_real(rng, 30, s.width - 30);
    const double r = uniform_real(rng, 18, 30);
    cv.rect(static_cast<int>(cx) - 2, horizon - static_cast<int>(r), 5, static_cast<int>(r) + (kerb - horizon), {0.35, 0.25, 0.15},
            kVegetation);
    cv.ellipse(cx, horizon - r, r, r * 0.9, jitter(rng, {0.25, 0.50, 0.20}, 0.06), kVegetation);
  }

  // sidewalk and road with lane dashes
  cv.rect(0, horizon, s.width, kerb - horizon, jitter(rng, {0.68, 0.62, 0.62}, 0.03), kSidewalk);
  const Rgb asphalt = jitter(rng, {0.30, 0.30, 0.32}, 0.03);
  for (int y = kerb; y < s.height; ++y) {
    const double t = static_cast<double>(y - kerb) / (s.height - kerb);
    cv.rect(0, y, s.width, 1, shade(asphalt, 1.0 + 0.25 * t), kRoad);
  }
  const int lane_y = (kerb + s.height) / 2 + 8;
  for (int x = uniform_int(rng, 0, 30); x < s.width; x += 70) cv.rect(x, lane_y, 36, 4, {0.92, 0.92, 0.88}, kRoad);

  // poles with a sign
  const int poles = uniform_int(rng, 1, 2);
  for (int p = 0; p < poles; ++p) {
    const int px = uniform_int(rng, 20, s.width - 20);
    const int ptop = uniform_int(rng, 30, horizon - 30);
    cv.rect(px, ptop, 4, kerb - ptop, {0.25, 0.25, 0.28}, kPole);
    cv.rect(px - 8, ptop, 20, 14, {0.90, 0.75, 0.10}, kSign);
  }

  // cars in disjoint horizontal slots, pedestrians on the sidewalk edge
  int car_k = 0;
  for (int slot = 0; slot < 4; ++slot) {
    if (uniform_real(rng, 0.0, 1.0) < 0.25) continue;
    const int slot_w = s.width / 4;
    const int w = uniform_int(rng, 70, 110);
    const int h = static_cast<int>(w * uniform_real(rng, 0.45, 0.6));
    const int x = slot * slot_w + uniform_int(rng, 0, std::max(0, slot_w - w - 4));
    const int bottom = uniform_int(rng, kerb + h / 2 + 10, s.height - 6);
    draw_car(cv, rng, x, bottom, w, h, kCar * 1000 + car_k++);
  }
  const int peds = uniform_int(rng, 1, 3);
  for (int p = 0; p < peds; ++p) {
    const int h = uniform_int(rng, 55, 80);
    const int x = uniform_int(rng, 10, s.width - 40);
    draw_pedestrian(cv, rng, x, kerb + uniform_int(rng, 2, 10), h, kPerson * 1000 + p);
  }
  return s;
}

}  // namespace sgi::data
