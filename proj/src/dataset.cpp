#include "sgi/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_map>

#include "sgi/image_io.hpp"
#include "sgi/rng.hpp"

namespace sgi::data {

namespace fs = std::filesystem;

std::string to_string(Split s) { return s == Split::train ? "train" : "val"; }

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  throw DatasetError("unknown split '" + s + "'");
}

std::string to_string(ObjectClass c) { return c == ObjectClass::car ? "car" : "pedestrian"; }

ObjectClass parse_object_class(const std::string& s) {
  if (s == "car") return ObjectClass::car;
  if (s == "pedestrian") return ObjectClass::pedestrian;
  throw DatasetError("unknown object class '" + s + "'");
}

void validate_scene(const Scene& s) {
  const size_t n = static_cast<size_t>(s.height) * s.width;
  if (s.height <= 0 || s.width <= 0) throw DatasetError(s.id + ": empty scene");
  if (s.image.size() != 3 * n || s.labels.size() != n || s.instances.size() != n)
    throw DatasetError(s.id + ": image, label and instance maps differ in size");
}

namespace {

struct GroupSpec {
  const char* name;
  std::vector<int> raw;
};

ClassAggregation from_groups(const std::string& name, const std::vector<GroupSpec>& groups) {
  ClassAggregation agg;
  agg.name = name;
  agg.num_groups = static_cast<int>(groups.size());
  for (size_t g = 0; g < groups.size(); ++g) {
    agg.group_names.emplace_back(groups[g].name);
    for (int r : groups[g].raw) agg.raw_to_group[r] = static_cast<int>(g);
  }
  return agg;
}

}  // namespace

ClassAggregation identity_aggregation(int n) {
  ClassAggregation agg;
  agg.name = "identity";
  agg.num_groups = n;
  for (int i = 0; i < n; ++i) {
    agg.raw_to_group[i] = i;
    agg.group_names.push_back(std::to_string(i));
  }
  return agg;
}

// Raw ids follow the Cityscapes labelIds (license plate is -1).
ClassAggregation cityscapes_aggregation() {
  return from_groups("cityscapes", {
                                       {"void", {-1, 0, 1, 2, 3, 4, 5}},
                                       {"ground", {6, 9, 10}},
                                       {"road", {7}},
                                       {"sidewalk", {8}},
                                       {"building", {11}},
                                       {"wall", {12}},
                                       {"fence", {13, 14}},
                                       {"bridge_tunnel", {15, 16}},
                                       {"pole", {17, 18}},
                                       {"sign_light", {19, 20}},
                                       {"vegetation", {21}},
                                       {"terrain", {22}},
                                       {"sky", {23}},
                                       {"person", {24}},
                                       {"rider", {25}},
                                       {"car", {26}},
                                       {"other_vehicle", {27, 28, 29, 30, 31, 32, 33}},
                                   });
}

// Raw ids follow the IDD level-3 label ids 0..39.
ClassAggregation idd_aggregation() {
  return from_groups("idd", {
                                {"void", {34, 35, 36, 37, 38, 39}},
                                {"road", {0}},
                                {"parking_drivable", {1, 2}},
                                {"sidewalk", {3}},
                                {"rail_nondrivable", {4, 5}},
                                {"person", {6}},
                                {"animal", {7}},
                                {"rider", {8}},
                                {"two_wheeler", {9, 10}},
                                {"autorickshaw", {11}},
                                {"car", {12}},
                                {"large_vehicle", {13, 14, 15, 16, 17, 18}},
                                {"curb", {19}},
                                {"wall", {20}},
                                {"fence", {21, 22}},
                                {"billboard", {23}},
                                {"sign_light", {24, 25}},
                                {"pole", {26, 27, 28}},
                                {"building", {29, 30, 31}},
                                {"vegetation", {32}},
                                {"sky", {33}},
                            });
}

ClassAggregation read_aggregation(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DatasetError("cannot open aggregation table " + path.string());
  ClassAggregation agg;
  agg.name = path.stem().string();
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    std::istringstream ls(line);
    int raw = 0, group = 0;
    if (!(ls >> raw)) continue;
    std::string extra;
    if (!(ls >> group) || (ls >> extra))
      throw DatasetError(path.string() + ":" + std::to_string(lineno) + ": expected 'raw_id group_id'");
    if (group < 0) throw DatasetError(path.string() + ":" + std::to_string(lineno) + ": negative group");
    if (!agg.raw_to_group.emplace(raw, group).second)
      throw DatasetError(path.string() + ":" + std::to_string(lineno) + ": duplicate raw id");
    agg.num_groups = std::max(agg.num_groups, group + 1);
  }
  for (int g = 0; g < agg.num_groups; ++g) agg.group_names.push_back(std::to_string(g));
  return agg;
}

void write_aggregation(const fs::path& path, const ClassAggregation& agg) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DatasetError("cannot write " + path.string());
  out << "# raw_id group_id\n";
  for (size_t g = 0; g < agg.group_names.size(); ++g) out << "# " << g << " " << agg.group_names[g] << '\n';
  for (const auto& [raw, group] : agg.raw_to_group) out << raw << ' ' << group << '\n';
}

DatasetProfile cityscapes_profile() {
  DatasetProfile p;
  p.name = "cityscapes";
  p.aggregation = cityscapes_aggregation();
  p.car_group = 15;
  p.pedestrian_group = 13;
  p.instance_id_floor = 1000;
  return p;
}

DatasetProfile idd_profile() {
  DatasetProfile p;
  p.name = "idd";
  p.aggregation = idd_aggregation();
  p.car_group = 10;
  p.pedestrian_group = 5;
  p.instance_id_floor = 1000;
  p.idd_resolution_rules = true;
  return p;
}

DatasetProfile fixture_profile() {
  DatasetProfile p = cityscapes_profile();
  p.name = "fixture";
  p.image_size = 64;
  p.min_instance_pixels = 40;
  return p;
}

DatasetProfile profile_by_name(const std::string& name) {
  if (name == "cityscapes") return cityscapes_profile();
  if (name == "idd") return idd_profile();
  if (name == "fixture") return fixture_profile();
  throw DatasetError("unknown profile '" + name + "'");
}

std::optional<ObjectClass> object_class_of_group(const DatasetProfile& p, int group) {
  if (group == p.car_group) return ObjectClass::car;
  if (group == p.pedestrian_group) return ObjectClass::pedestrian;
  return std::nullopt;
}

int group_of_object_class(const DatasetProfile& p, ObjectClass c) {
  return c == ObjectClass::car ? p.car_group : p.pedestrian_group;
}

Scene load_scene(const fs::path& root, Split split, const std::string& id, const LoadOptions& opt) {
  const std::string sp = to_string(split);
  const fs::path img_path = root / "images" / sp / (id + ".png");
  const fs::path lab_path = root / "labels" / sp / (id + ".png");
  const fs::path ins_path = root / "instances" / sp / (id + ".png");
  for (const auto& p : {img_path, lab_path, ins_path}) {
    if (!fs::exists(p)) throw DatasetError("missing file " + p.string());
  }
  const PngImage img = read_png(img_path);
  const PngImage lab = read_png(lab_path);
  const PngImage ins = read_png(ins_path);
  if (img.channels != 3) throw DatasetError(img_path.string() + ": expected RGB");
  if (lab.channels != 1 || ins.channels != 1) throw DatasetError(id + ": label and instance maps must be single channel");
  if (lab.width != img.width || lab.height != img.height || ins.width != img.width || ins.height != img.height) {
    throw DatasetError(id + ": dimension mismatch (image " + std::to_string(img.width) + "x" +
                       std::to_string(img.height) + ", label " + std::to_string(lab.width) + "x" +
                       std::to_string(lab.height) + ", instances " + std::to_string(ins.width) + "x" +
                       std::to_string(ins.height) + ")");
  }
  Scene s;
  s.id = id;
  s.split = split;
  s.width = img.width;
  s.height = img.height;
  const double scale = img.bit_depth == 16 ? 65535.0 : 255.0;
  s.image.resize(img.samples.size());
  for (size_t i = 0; i < img.samples.size(); ++i) s.image[i] = img.samples[i] / scale;
  s.labels.assign(lab.samples.begin(), lab.samples.end());
  s.instances.resize(ins.samples.size());
  for (size_t i = 0; i < ins.samples.size(); ++i) {
    const int v = ins.samples[i];
    s.instances[i] = v < opt.instance_id_floor ? 0 : v;
  }
  return s;
}

void save_scene(const fs::path& root, const Scene& scene) {
  validate_scene(scene);
  const std::string sp = to_string(scene.split);
  PngImage img = make_png(scene.width, scene.height, 3, 8);
  for (size_t i = 0; i < scene.image.size(); ++i)
    img.samples[i] = static_cast<uint16_t>(std::lround(std::clamp(scene.image[i], 0.0, 1.0) * 255.0));
  PngImage lab = make_png(scene.width, scene.height, 1, 8);
  for (size_t i = 0; i < scene.labels.size(); ++i) {
    const int v = scene.labels[i];
    if (v < 0 || v > 255) throw DatasetError(scene.id + ": label value does not fit 8 bits");
    lab.samples[i] = static_cast<uint16_t>(v);
  }
  PngImage ins = make_png(scene.width, scene.height, 1, 16);
  for (size_t i = 0; i < scene.instances.size(); ++i) {
    const int v = scene.instances[i];
    if (v < 0 || v > 65535) throw DatasetError(scene.id + ": instance id does not fit 16 bits");
    ins.samples[i] = static_cast<uint16_t>(v);
  }
  write_png(root / "images" / sp / (scene.id + ".png"), img);
  write_png(root / "labels" / sp / (scene.id + ".png"), lab);
  write_png(root / "instances" / sp / (scene.id + ".png"), ins);
}

std::vector<std::string> list_scene_ids(const fs::path& root, Split split) {
  const fs::path dir = root / "images" / to_string(split);
  if (!fs::is_directory(dir)) throw DatasetError("missing directory " + dir.string());
  std::vector<std::string> ids;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".png") ids.push_back(e.path().stem().string());
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

Scene aggregate_classes(const Scene& scene, const ClassAggregation& agg) {
  validate_scene(scene);
  Scene out = scene;
  std::unordered_map<int, int> cache(agg.raw_to_group.begin(), agg.raw_to_group.end());
  for (auto& v : out.labels) {
    auto it = cache.find(v);
    if (it == cache.end()) throw DatasetError(scene.id + ": unmapped raw category " + std::to_string(v));
    v = it->second;
  }
  return out;
}

Scene resize_scene(const Scene& scene, int height, int width) {
  validate_scene(scene);
  if (height <= 0 || width <= 0) throw DatasetError("resize: empty target");
  if (height == scene.height && width == scene.width) return scene;
  Scene out;
  out.id = scene.id;
  out.split = scene.split;
  out.height = height;
  out.width = width;
  out.image.resize(static_cast<size_t>(height) * width * 3);
  out.labels.resize(static_cast<size_t>(height) * width);
  out.instances.resize(out.labels.size());
  const double sy = static_cast<double>(scene.height) / height;
  const double sx = static_cast<double>(scene.width) / width;
  for (int y = 0; y < height; ++y) {
    const double fy = std::max(0.0, (y + 0.5) * sy - 0.5);
    const int y0 = std::min(static_cast<int>(fy), scene.height - 1);
    const int y1 = std::min(y0 + 1, scene.height - 1);
    const double wy = fy - y0;
    const int ny = std::min(static_cast<int>((y + 0.5) * sy), scene.height - 1);
    for (int x = 0; x < width; ++x) {
      const double fx = std::max(0.0, (x + 0.5) * sx - 0.5);
      const int x0 = std::min(static_cast<int>(fx), scene.width - 1);
      const int x1 = std::min(x0 + 1, scene.width - 1);
      const double wx = fx - x0;
      for (int c = 0; c < 3; ++c) {
        const double top = scene.pixel(y0, x0, c) * (1 - wx) + scene.pixel(y0, x1, c) * wx;
        const double bot = scene.pixel(y1, x0, c) * (1 - wx) + scene.pixel(y1, x1, c) * wx;
        out.image[(static_cast<size_t>(y) * width + x) * 3 + c] = top * (1 - wy) + bot * wy;
      }
      const int nx = std::min(static_cast<int>((x + 0.5) * sx), scene.width - 1);
      out.labels[static_cast<size_t>(y) * width + x] = scene.label(ny, nx);
      out.instances[static_cast<size_t>(y) * width + x] = scene.instance(ny, nx);
    }
  }
  return out;
}

int crop_offset(int extent, int crop, uint64_t seed, int axis) {
  if (extent < crop) throw DatasetError("crop larger than source");
  Rng rng = split_rng(seed, axis == 0 ? "crop-y" : "crop-x");
  return uniform_int(rng, 0, extent - crop);
}

Scene resize_and_crop(const Scene& scene, int height, int crop_h, int crop_w, uint64_t seed) {
  validate_scene(scene);
  if (scene.height < height)
    throw DatasetError(scene.id + ": source too small (" + std::to_string(scene.height) + " px tall, need " +
                       std::to_string(height) + ")");
  const int width = static_cast<int>(std::lround(static_cast<double>(scene.width) * height / scene.height));
  if (width < crop_w || height < crop_h)
    throw DatasetError(scene.id + ": source too small for a " + std::to_string(crop_w) + "x" + std::to_string(crop_h) +
                       " crop");
  const Scene resized = resize_scene(scene, height, width);
  const int oy = crop_offset(height, crop_h, seed, 0);
  const int ox = crop_offset(width, crop_w, seed, 1);
  Scene out;
  out.id = scene.id;
  out.split = scene.split;
  out.height = crop_h;
  out.width = crop_w;
  out.image.resize(static_cast<size_t>(crop_h) * crop_w * 3);
  out.labels.resize(static_cast<size_t>(crop_h) * crop_w);
  out.instances.resize(out.labels.size());
  for (int y = 0; y < crop_h; ++y) {
    for (int x = 0; x < crop_w; ++x) {
      const size_t src = static_cast<size_t>(y + oy) * width + (x + ox);
      const size_t dst = static_cast<size_t>(y) * crop_w + x;
      for (int c = 0; c < 3; ++c) out.image[dst * 3 + c] = resized.image[src * 3 + c];
      out.labels[dst] = resized.labels[src];
      out.instances[dst] = resized.instances[src];
    }
  }
  return out;
}

std::optional<Scene> preprocess_scene(const Scene& raw, const DatasetProfile& profile, int size, uint64_t seed) {
  Scene s = aggregate_classes(raw, profile.aggregation);
  if (profile.idd_resolution_rules) {
    if (s.height == 720) return std::nullopt;
    if (s.height == 1080) s = resize_scene(s, 288, 512);
  }
  return resize_and_crop(s, size, size, size, seed);
}

int prepare_dataset(const fs::path& raw_root, const fs::path& out_root, const DatasetProfile& profile, Split split,
                    int size, uint64_t seed) {
  int written = 0;
  for (const auto& id : list_scene_ids(raw_root, split)) {
    const Scene raw = load_scene(raw_root, split, id, LoadOptions{profile.instance_id_floor});
    auto s = preprocess_scene(raw, profile, size, seed ^ fnv1a(id));
    if (!s) continue;
    save_scene(out_root, *s);
    ++written;
  }
  write_aggregation(out_root / "classes.txt", profile.aggregation);
  return written;
}

std::vector<InstanceRecord> index_instances(const Scene& scene, const DatasetProfile& profile, int min_pixels,
                                            double max_occlusion) {
  validate_scene(scene);
  struct Acc {
    int x0 = 1 << 30, y0 = 1 << 30, x1 = -1, y1 = -1;
    int64_t count = 0;
    std::map<int, int64_t> votes;
  };
  std::map<int32_t, Acc> acc;
  for (int y = 0; y < scene.height; ++y) {
    for (int x = 0; x < scene.width; ++x) {
      const int32_t id = scene.instance(y, x);
      if (id == 0) continue;
      Acc& a = acc[id];
      a.x0 = std::min(a.x0, x);
      a.y0 = std::min(a.y0, y);
      a.x1 = std::max(a.x1, x);
      a.y1 = std::max(a.y1, y);
      ++a.count;
      ++a.votes[scene.label(y, x)];
    }
  }
  std::vector<InstanceRecord> out;
  for (const auto& [id, a] : acc) {
    // majority class; ties go to the smaller label id
    int best = -1;
    int64_t best_votes = -1;
    for (const auto& [label, n] : a.votes) {
      if (n > best_votes) {
        best = label;
        best_votes = n;
      }
    }
    const auto cls = object_class_of_group(profile, best);
    if (!cls) continue;
    InstanceRecord r;
    r.instance_id = id;
    r.class_label = *cls;
    r.bbox = BBox{a.x0, a.y0, a.x1 - a.x0 + 1, a.y1 - a.y0 + 1};
    r.pixel_count = a.count;
    const double visible = static_cast<double>(a.count) / (static_cast<double>(r.bbox.w) * r.bbox.h);
    r.occluded = visible < 1.0 - max_occlusion;
    if (r.pixel_count < min_pixels || r.occluded) continue;
    out.push_back(r);
  }
  return out;
}

}  // namespace sgi::data
