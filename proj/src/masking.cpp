#include "sgi/masking.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>

namespace sgi::mask {

std::string to_string(MaskMode m) { return m == MaskMode::restore ? "restore" : "place"; }

MaskMode parse_mask_mode(const std::string& s) {
  if (s == "restore") return MaskMode::restore;
  if (s == "place") return MaskMode::place;
  throw MaskError("unknown mask mode '" + s + "'");
}

MaskRect sample_restore_mask(Rng& rng, int image_size) {
  MaskRect r;
  r.w = uniform_int(rng, min_mask_side(image_size), max_mask_side(image_size));
  r.h = uniform_int(rng, min_mask_side(image_size), max_mask_side(image_size));
  r.x = uniform_int(rng, 0, image_size - r.w);
  r.y = uniform_int(rng, 0, image_size - r.h);
  r.mode = MaskMode::restore;
  return r;
}

MaskRect sample_place_mask(Rng& rng, const std::vector<InstanceRecord>& instances, int image_size) {
  if (instances.empty()) {
    MaskRect r = sample_restore_mask(rng, image_size);
    r.mode = MaskMode::place;
    return r;
  }
  const auto& inst = instances[static_cast<size_t>(uniform_int(rng, 0, static_cast<int>(instances.size()) - 1))];
  const int cx = std::clamp(inst.bbox.cx(), 0, image_size - 1);
  const int cy = std::clamp(inst.bbox.cy(), 0, image_size - 1);
  MaskRect r;
  r.w = uniform_int(rng, min_mask_side(image_size), max_mask_side(image_size));
  r.h = uniform_int(rng, min_mask_side(image_size), max_mask_side(image_size));
  // every placement that keeps the center inside and the rect on the canvas
  r.x = uniform_int(rng, std::max(0, cx - r.w + 1), std::min(image_size - r.w, cx));
  r.y = uniform_int(rng, std::max(0, cy - r.h + 1), std::min(image_size - r.h, cy));
  r.mode = MaskMode::place;
  r.target_instance = inst.instance_id;
  return r;
}

void validate_rect(const MaskRect& r, int image_size) {
  const int lo = min_mask_side(image_size), hi = max_mask_side(image_size);
  if (r.w < lo || r.w > hi || r.h < lo || r.h > hi)
    throw MaskError("mask size " + std::to_string(r.w) + "x" + std::to_string(r.h) + " outside [" +
                    std::to_string(lo) + ", " + std::to_string(hi) + "]");
  if (r.x < 0 || r.y < 0 || r.x + r.w > image_size || r.y + r.h > image_size)
    throw MaskError("mask rect out of bounds");
}

Tensor image_tensor(const Scene& s) {
  data::validate_scene(s);
  Tensor t({1, 3, s.height, s.width});
  for (int y = 0; y < s.height; ++y)
    for (int x = 0; x < s.width; ++x)
      for (int c = 0; c < 3; ++c) t.at(0, c, y, x) = s.pixel(y, x, c);
  return t;
}

Tensor one_hot(const Scene& s, int num_classes) {
  data::validate_scene(s);
  Tensor t({1, num_classes, s.height, s.width});
  for (int y = 0; y < s.height; ++y)
    for (int x = 0; x < s.width; ++x) {
      const int l = s.label(y, x);
      if (l < 0 || l >= num_classes)
        throw MaskError(s.id + ": label " + std::to_string(l) + " outside [0, " + std::to_string(num_classes) + ")");
      t.at(0, l, y, x) = 1.0;
    }
  return t;
}

Tensor keep_mask(const MaskRect& r, int height, int width) {
  if (r.x < 0 || r.y < 0 || r.x + r.w > width || r.y + r.h > height) throw MaskError("mask rect out of bounds");
  Tensor m({1, 1, height, width}, 1.0);
  for (int y = r.y; y < r.y + r.h; ++y)
    for (int x = r.x; x < r.x + r.w; ++x) m.at(0, 0, y, x) = 0.0;
  return m;
}

MaskedScene apply_keep_mask(const Scene& scene, const Tensor& m, int num_classes) {
  require_shape(m, {1, 1, scene.height, scene.width}, "keep mask");
  MaskedScene ms;
  ms.m = m;
  ms.x_blanked = image_tensor(scene);
  ms.s_blanked = one_hot(scene, num_classes);
  const int64_t plane = static_cast<int64_t>(scene.height) * scene.width;
  for (int c = 0; c < 3; ++c)
    for (int64_t i = 0; i < plane; ++i) ms.x_blanked[c * plane + i] *= m[i];
  for (int c = 0; c < num_classes; ++c)
    for (int64_t i = 0; i < plane; ++i) ms.s_blanked[c * plane + i] *= m[i];
  return ms;
}

MaskedScene apply_mask(const Scene& scene, const MaskRect& rect, int num_classes) {
  return apply_keep_mask(scene, keep_mask(rect, scene.height, scene.width), num_classes);
}

nn::Affine bbox_theta(const data::BBox& b, int canonical) {
  return {static_cast<double>(b.w) / canonical, 0.0, static_cast<double>(b.x),
          0.0, static_cast<double>(b.h) / canonical, static_cast<double>(b.y)};
}

std::array<double, 4> bbox_location(const data::BBox& b, int image_size) {
  const double s = image_size;
  return {b.cx() / s, b.cy() / s, b.w / s, b.h / s};
}

std::array<double, kThetaDim> theta_features(const nn::Affine& t, int image_size, int canonical) {
  const double k = static_cast<double>(canonical) / image_size;
  return {t[0] * k, t[1] * k, t[2] / image_size, t[3] * k, t[4] * k, t[5] / image_size};
}

nn::Affine theta_from_features(const std::array<double, kThetaDim>& f, int image_size, int canonical) {
  const double k = static_cast<double>(image_size) / canonical;
  return {f[0] * k, f[1] * k, f[2] * image_size, f[3] * k, f[4] * k, f[5] * image_size};
}

InstanceSpec extract_instance_spec(const Scene& scene, const InstanceRecord& record, int canonical) {
  const auto& b = record.bbox;
  bool found = false;
  for (int y = b.y; y < b.y + b.h && !found; ++y)
    for (int x = b.x; x < b.x + b.w && !found; ++x) {
      if (y >= 0 && y < scene.height && x >= 0 && x < scene.width && scene.instance(y, x) == record.instance_id)
        found = true;
    }
  if (!found) throw MaskError(scene.id + ": instance " + std::to_string(record.instance_id) + " not found");
  InstanceSpec spec;
  spec.cls = record.class_label;
  spec.theta = bbox_theta(b, canonical);
  spec.l = bbox_location(b, scene.height);
  spec.m_s = Tensor({1, 1, canonical, canonical});
  // nearest sampling at canonical pixel centers
  for (int i = 0; i < canonical; ++i) {
    const int y = b.y + static_cast<int>(std::floor((i + 0.5) * b.h / canonical));
    for (int j = 0; j < canonical; ++j) {
      const int x = b.x + static_cast<int>(std::floor((j + 0.5) * b.w / canonical));
      spec.m_s.at(0, 0, i, j) = scene.instance(y, x) == record.instance_id ? 1.0 : 0.0;
    }
  }
  return spec;
}

std::vector<double> shape_input_vector(const InstanceSpec& spec, int image_size) {
  std::vector<double> v(spec.m_s.values().begin(), spec.m_s.values().end());
  for (int c = 0; c < data::kNumObjectClasses; ++c) v.push_back(static_cast<int>(spec.cls) == c ? 1.0 : 0.0);
  const auto tf = theta_features(spec.theta, image_size, static_cast<int>(spec.m_s.dim(3)));
  v.insert(v.end(), tf.begin(), tf.end());
  return v;
}

void write_manifest(std::ostream& out, const std::vector<ManifestEntry>& entries) {
  out << kManifestHeader << '\n';
  for (const auto& e : entries) {
    if (e.id.empty() || e.id.find_first_of(" \t\n") != std::string::npos)
      throw MaskError("manifest id must be a non-empty token: '" + e.id + "'");
    const auto& r = e.rect;
    out << e.id << ' ' << r.x << ' ' << r.y << ' ' << r.w << ' ' << r.h << ' ' << to_string(r.mode) << ' '
        << (r.target_instance ? std::to_string(*r.target_instance) : std::string("-")) << ' ' << r.seed << '\n';
  }
}

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw MaskError("cannot write " + path.string());
  write_manifest(out, entries);
}

namespace {

template <class T>
T parse_number(const std::string& tok, const std::string& where) {
  std::istringstream is(tok);
  T v{};
  if (!(is >> v) || !is.eof()) throw MaskError(where + ": bad number '" + tok + "'");
  return v;
}

}  // namespace

std::vector<ManifestEntry> read_manifest(std::istream& in, const std::string& source) {
  std::vector<ManifestEntry> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string where = source + ":" + std::to_string(lineno);
    if (lineno == 1) {
      if (line != kManifestHeader) throw MaskError(where + ": malformed line (missing manifest header)");
      continue;
    }
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::istringstream ls(line);
    for (std::string tok; ls >> tok;) f.push_back(tok);
    if (f.size() != 8) throw MaskError(where + ": malformed line (expected 8 fields, got " + std::to_string(f.size()) + ")");
    ManifestEntry e;
    e.id = f[0];
    try {
      e.rect.x = parse_number<int>(f[1], where);
      e.rect.y = parse_number<int>(f[2], where);
      e.rect.w = parse_number<int>(f[3], where);
      e.rect.h = parse_number<int>(f[4], where);
      e.rect.mode = parse_mask_mode(f[5]);
      if (f[6] != "-") e.rect.target_instance = parse_number<int32_t>(f[6], where);
      e.rect.seed = parse_number<uint64_t>(f[7], where);
    } catch (const MaskError& err) {
      throw MaskError(where + ": malformed line (" + err.what() + ")");
    }
    out.push_back(std::move(e));
  }
  if (lineno == 0) throw MaskError(source + ":1: malformed line (missing manifest header)");
  return out;
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MaskError("cannot open " + path.string());
  return read_manifest(in, path.string());
}

std::vector<ManifestEntry> generate_manifest(const std::vector<std::string>& ids,
                                             const std::vector<std::vector<InstanceRecord>>& instances, MaskMode mode,
                                             uint64_t seed, int image_size) {
  if (mode == MaskMode::place && instances.size() != ids.size())
    throw MaskError("place manifest needs one instance list per id");
  std::vector<ManifestEntry> out;
  for (size_t i = 0; i < ids.size(); ++i) {
    Rng rng = split_rng(seed, to_string(mode) + "/" + ids[i]);
    ManifestEntry e;
    e.id = ids[i];
    e.rect = mode == MaskMode::restore ? sample_restore_mask(rng, image_size)
                                       : sample_place_mask(rng, instances[i], image_size);
    e.rect.seed = seed;
    out.push_back(std::move(e));
  }
  return out;
}

PngImage mask_to_png(const Tensor& m) {
  require_rank(m, 4, "mask");
  PngImage png = make_png(static_cast<int>(m.dim(3)), static_cast<int>(m.dim(2)), 1, 8);
  for (size_t i = 0; i < png.samples.size(); ++i) png.samples[i] = m[static_cast<int64_t>(i)] >= 0.5 ? 255 : 0;
  return png;
}

Tensor mask_from_png(const PngImage& png) {
  const uint16_t half = png.bit_depth == 16 ? 32768 : 128;
  Tensor m({1, 1, png.height, png.width});
  // colour masks use their first channel
  for (int64_t i = 0; i < m.numel(); ++i)
    m[i] = png.samples[static_cast<size_t>(i) * png.channels] >= half ? 1.0 : 0.0;
  return m;
}

}  // namespace sgi::mask
