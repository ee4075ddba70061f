#pragma once

#include <filesystem>
#include <random>
#include <string>

#include "sgi/rng.hpp"
#include "sgi/dataset.hpp"

namespace sgi::testing {

/// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    std::random_device rd;
    path_ = std::filesystem::temp_directory_path() / ("sgi_" + tag + "_" + std::to_string(rd()));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

/// Uniform scene: gray image, one label everywhere, no instances.
inline data::Scene flat_scene(int h, int w, int label = 0, const std::string& id = "flat") {
  data::Scene s;
  s.id = id;
  s.height = h;
  s.width = w;
  s.image.assign(static_cast<size_t>(h) * w * 3, 0.5);
  s.labels.assign(static_cast<size_t>(h) * w, label);
  s.instances.assign(static_cast<size_t>(h) * w, 0);
  return s;
}

/// Paints a filled rectangle of the given label and instance id.
inline void paint_rect(data::Scene& s, int x, int y, int w, int h, int label, int instance) {
  for (int yy = y; yy < y + h; ++yy)
    for (int xx = x; xx < x + w; ++xx) {
      s.labels[static_cast<size_t>(yy) * s.width + xx] = label;
      s.instances[static_cast<size_t>(yy) * s.width + xx] = instance;
    }
}

inline std::filesystem::path source_dir() { return SGI_SOURCE_DIR; }

}  // namespace sgi::testing
