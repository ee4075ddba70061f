#pragma once

#include <array>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "sgi/dataset.hpp"
#include "sgi/image_io.hpp"
#include "sgi/ops.hpp"
#include "sgi/rng.hpp"

namespace sgi::mask {

using data::InstanceRecord;
using data::ObjectClass;
using data::Scene;

constexpr int kImageSize = 256;
constexpr int kMinMaskSide = 32;
constexpr int kMaxMaskSide = 128;
constexpr int kCanonicalSize = 64;

/// Mask side bounds scale with the canvas: 32..128 at 256.
constexpr int min_mask_side(int image_size) { return image_size * kMinMaskSide / kImageSize; }
constexpr int max_mask_side(int image_size) { return image_size * kMaxMaskSide / kImageSize; }
constexpr int kThetaDim = 6;

enum class MaskMode { restore, place };
std::string to_string(MaskMode m);
MaskMode parse_mask_mode(const std::string& s);

class MaskError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct MaskRect {
  int x = 0, y = 0, w = 0, h = 0;
  MaskMode mode = MaskMode::restore;
  std::optional<int32_t> target_instance;
  uint64_t seed = 0;

  bool contains(int px, int py) const { return px >= x && px < x + w && py >= y && py < y + h; }
  bool operator==(const MaskRect&) const = default;
};

MaskRect sample_restore_mask(Rng& rng, int image_size = kImageSize);
/// Mask covering the bbox center of a uniformly chosen instance; restore
/// sampling when the list is empty.
MaskRect sample_place_mask(Rng& rng, const std::vector<InstanceRecord>& instances, int image_size = kImageSize);
/// Throws MaskError unless the size and bounds invariants hold.
void validate_rect(const MaskRect& r, int image_size = kImageSize);

/// NCHW tensors with batch 1; x_blanked is in [0, 1].
struct MaskedScene {
  Tensor x_blanked;  // (1,3,H,W)
  Tensor s_blanked;  // (1,C,H,W)
  Tensor m;          // (1,1,H,W), 1 = keep
};

Tensor image_tensor(const Scene& s);
Tensor one_hot(const Scene& s, int num_classes);
/// Keep-mask that is 0 inside the rect.
Tensor keep_mask(const MaskRect& r, int height, int width);

MaskedScene apply_mask(const Scene& scene, const MaskRect& rect, int num_classes);
/// Free-form variant; `m` is a (1,1,H,W) binary keep-mask.
MaskedScene apply_keep_mask(const Scene& scene, const Tensor& m, int num_classes);

struct InstanceSpec {
  ObjectClass cls = ObjectClass::car;
  Tensor m_s;  // (1,1,64,64) binary
  nn::Affine theta{};
  std::array<double, 4> l{};  // (cx, cy, w, h) / image size
};

/// Affine map taking the canonical frame onto a bbox.
nn::Affine bbox_theta(const data::BBox& b, int canonical = kCanonicalSize);
/// Location vector of a bbox.
std::array<double, 4> bbox_location(const data::BBox& b, int image_size = kImageSize);
/// Scale-free theta fed to the networks: linear part in units of image/canonical, offsets in image units.
std::array<double, kThetaDim> theta_features(const nn::Affine& theta, int image_size = kImageSize,
                                             int canonical = kCanonicalSize);
nn::Affine theta_from_features(const std::array<double, kThetaDim>& f, int image_size = kImageSize,
                               int canonical = kCanonicalSize);

InstanceSpec extract_instance_spec(const Scene& scene, const InstanceRecord& record, int canonical = kCanonicalSize);
/// flatten(m_s) ++ one_hot(c) ++ theta features.
std::vector<double> shape_input_vector(const InstanceSpec& spec, int image_size = kImageSize);

struct ManifestEntry {
  std::string id;
  MaskRect rect;
  bool operator==(const ManifestEntry&) const = default;
};

inline constexpr const char* kManifestHeader = "# sgi-mask-manifest v1";

void write_manifest(std::ostream& out, const std::vector<ManifestEntry>& entries);
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries);
std::vector<ManifestEntry> read_manifest(std::istream& in, const std::string& source = "manifest");
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);

/// One entry per id; each id gets its own stream split from `seed`.
std::vector<ManifestEntry> generate_manifest(const std::vector<std::string>& ids,
                                             const std::vector<std::vector<InstanceRecord>>& instances, MaskMode mode,
                                             uint64_t seed, int image_size = kImageSize);

/// 8-bit gray PNG, 0 = hole, 255 = keep.
PngImage mask_to_png(const Tensor& m);
/// Samples >= half range count as keep.
Tensor mask_from_png(const PngImage& png);

}  // namespace sgi::mask
