#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "sslseg/image.hpp"

namespace sslseg {

/// 16-bit quantization used for all on-disk pixels: full round trip keeps
/// every pixel within 1/65535 of the in-memory value.
inline std::uint16_t quantize16(float v) {
  const float c = std::clamp(v, 0.0f, 1.0f);
  return static_cast<std::uint16_t>(std::lround(c * 65535.0f));
}
inline float dequantize16(std::uint16_t q) {
  return static_cast<float>(q) / 65535.0f;
}

/// Writes `img` as a 16-bit grayscale PNG (atomic: temp file + rename).
void write_png16(const std::filesystem::path& path, const Image& img);

/// Reads a 16-bit grayscale PNG written by write_png16. 8-bit grayscale
/// inputs are widened; anything else is rejected.
Image read_png16(const std::filesystem::path& path);

/// Interleaved 8-bit RGB buffer for preview figures.
struct RgbImage {
  int height = 0, width = 0;
  std::vector<std::uint8_t> data;  // h*w*3, row-major

  static RgbImage from_gray(const Image& img);
  void set(int r, int c, std::uint8_t red, std::uint8_t green,
           std::uint8_t blue);
  void draw_box_outline(const BBox& box, std::uint8_t red, std::uint8_t green,
                        std::uint8_t blue, int thickness = 2);
};

void write_png_rgb8(const std::filesystem::path& path, const RgbImage& img);

}  // namespace sslseg
