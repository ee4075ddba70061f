#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace sgi::data {

class DatasetError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class Split { train, val };
std::string to_string(Split s);
Split parse_split(const std::string& s);

/// Classes with an instance model; the value is the one-hot index of c.
enum class ObjectClass { car = 0, pedestrian = 1 };
constexpr int kNumObjectClasses = 2;
std::string to_string(ObjectClass c);
ObjectClass parse_object_class(const std::string& s);

/// Registered image / label / instance triple. Maps are row-major H*W; the
/// image is interleaved RGB in [0, 1]. Instance id 0 means "no instance".
struct Scene {
  std::string id;
  Split split = Split::train;
  int height = 0;
  int width = 0;
  std::vector<double> image;
  std::vector<int32_t> labels;
  std::vector<int32_t> instances;

  double pixel(int y, int x, int c) const { return image[(static_cast<size_t>(y) * width + x) * 3 + c]; }
  int32_t label(int y, int x) const { return labels[static_cast<size_t>(y) * width + x]; }
  int32_t instance(int y, int x) const { return instances[static_cast<size_t>(y) * width + x]; }
};

/// Checks the shared-size invariant; throws DatasetError.
void validate_scene(const Scene& s);

struct ClassAggregation {
  std::string name;
  std::map<int, int> raw_to_group;
  int num_groups = 0;
  std::vector<std::string> group_names;
};

ClassAggregation identity_aggregation(int n);
ClassAggregation cityscapes_aggregation();
ClassAggregation idd_aggregation();
/// Two-column `raw_id group_id` text; `#` starts a comment.
ClassAggregation read_aggregation(const std::filesystem::path& path);
void write_aggregation(const std::filesystem::path& path, const ClassAggregation& agg);

/// Dataset conventions bundled per profile.
struct DatasetProfile {
  std::string name;
  ClassAggregation aggregation;
  int car_group = -1;
  int pedestrian_group = -1;
  /// Instance PNG values below this carry no instance (Cityscapes stores class ids < 1000 there).
  int instance_id_floor = 1000;
  /// IDD: drop 720p sources and bring 1080p sources to 512x288 before the usual resize.
  bool idd_resolution_rules = false;
  /// Side of the square training canvas.
  int image_size = 256;
  int min_instance_pixels = 500;
  double max_occlusion = 0.5;
};

DatasetProfile cityscapes_profile();
DatasetProfile idd_profile();
/// Synthetic scenes drawn in the Cityscapes raw label space.
DatasetProfile fixture_profile();
DatasetProfile profile_by_name(const std::string& name);

std::optional<ObjectClass> object_class_of_group(const DatasetProfile& p, int group);
int group_of_object_class(const DatasetProfile& p, ObjectClass c);

struct LoadOptions {
  int instance_id_floor = 1;
};

/// Reads images/{split}/{id}.png, labels/{split}/{id}.png, instances/{split}/{id}.png.
Scene load_scene(const std::filesystem::path& root, Split split, const std::string& id, const LoadOptions& opt = {});
void save_scene(const std::filesystem::path& root, const Scene& scene);
/// Sorted ids of images/{split}/*.png.
std::vector<std::string> list_scene_ids(const std::filesystem::path& root, Split split);

Scene aggregate_classes(const Scene& scene, const ClassAggregation& agg);

/// Aspect-preserving resize to `height` (bilinear image, nearest maps), then a
/// seeded crop of crop_h x crop_w applied identically to all maps.
Scene resize_and_crop(const Scene& scene, int height, int crop_h, int crop_w, uint64_t seed);
/// Plain resize to an exact size (bilinear image, nearest maps).
Scene resize_scene(const Scene& scene, int height, int width);
/// Horizontal offset resize_and_crop would choose for a resized width.
int crop_offset(int extent, int crop, uint64_t seed, int axis);

/// Aggregation, profile resolution rules, then resize and crop to size x size.
/// Returns nullopt for sources the profile excludes.
std::optional<Scene> preprocess_scene(const Scene& raw, const DatasetProfile& profile, int size, uint64_t seed);

/// Preprocesses every scene of a raw split into `out_root` (same layout, group
/// labels, instance ids below the profile floor cleared). Returns the count written.
int prepare_dataset(const std::filesystem::path& raw_root, const std::filesystem::path& out_root,
                    const DatasetProfile& profile, Split split, int size, uint64_t seed);

struct BBox {
  int x = 0, y = 0, w = 0, h = 0;
  /// Center pixel (integer, rounds toward the top-left).
  int cx() const { return x + w / 2; }
  int cy() const { return y + h / 2; }
  bool operator==(const BBox&) const = default;
};

struct InstanceRecord {
  int32_t instance_id = 0;
  ObjectClass class_label = ObjectClass::car;
  BBox bbox;
  int64_t pixel_count = 0;
  bool occluded = false;
};

/// Modelled, large enough and not occluded instances, sorted by id.
std::vector<InstanceRecord> index_instances(const Scene& scene, const DatasetProfile& profile, int min_pixels,
                                            double max_occlusion);

/// Synthetic 256x512 street scene in raw Cityscapes label space with
/// Cityscapes-encoded instance ids (class * 1000 + k).
Scene generate_fixture_scene(uint64_t seed, const std::string& id, Split split);

}  // namespace sgi::data
