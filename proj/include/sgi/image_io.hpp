#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace sgi {

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Decoded PNG. Samples are interleaved row-major; 8-bit files use the low byte.
struct PngImage {
  int width = 0;
  int height = 0;
  int channels = 0;  // 1 (gray) or 3 (RGB)
  int bit_depth = 8;  // 8 or 16
  std::vector<uint16_t> samples;

  uint16_t at(int y, int x, int c = 0) const {
    return samples[(static_cast<size_t>(y) * width + x) * channels + c];
  }
  uint16_t& at(int y, int x, int c = 0) { return samples[(static_cast<size_t>(y) * width + x) * channels + c]; }
};

PngImage make_png(int width, int height, int channels, int bit_depth);

/// Decodes gray, gray+alpha, RGB, RGBA or palette PNGs. Alpha is dropped and
/// palette images are expanded to RGB; bit depths below 8 are expanded to 8.
PngImage decode_png(const std::vector<uint8_t>& bytes);
std::vector<uint8_t> encode_png(const PngImage& img);

PngImage read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const PngImage& img);

std::vector<uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, const std::vector<uint8_t>& bytes);

std::string base64_encode(const std::vector<uint8_t>& bytes);
/// Whitespace is ignored; throws IoError on malformed input.
std::vector<uint8_t> base64_decode(const std::string& text);

}  // namespace sgi
