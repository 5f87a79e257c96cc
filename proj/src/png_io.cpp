#include "sslseg/png_io.hpp"

#include <png.h>

#include <cstdio>
#include <memory>
#include <stdexcept>
#include <vector>

namespace sslseg {
namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

[[noreturn]] void fail(const std::filesystem::path& path, const char* what) {
  throw std::runtime_error(std::string(what) + ": " + path.string());
}

}  // namespace

void write_png16(const std::filesystem::path& path, const Image& img) {
  check_image_nonempty(img.rows(), img.cols(), "write_png16");
  const std::filesystem::path tmp = path.string() + ".tmp";
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  {
    FilePtr fp(std::fopen(tmp.string().c_str(), "wb"));
    if (!fp) fail(tmp, "cannot open for writing");
    png_structp png =
        png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
      png_destroy_write_struct(&png, &info);
      fail(tmp, "libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
      png_destroy_write_struct(&png, &info);
      fail(tmp, "libpng write error");
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.cols()),
                 static_cast<png_uint_32>(img.rows()), 16, PNG_COLOR_TYPE_GRAY,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);

    std::vector<std::uint8_t> row(static_cast<size_t>(img.cols()) * 2);
    for (Eigen::Index r = 0; r < img.rows(); ++r) {
      for (Eigen::Index c = 0; c < img.cols(); ++c) {
        const std::uint16_t q = quantize16(img(r, c));
        row[2 * c] = static_cast<std::uint8_t>(q >> 8);  // network byte order
        row[2 * c + 1] = static_cast<std::uint8_t>(q & 0xff);
      }
      png_write_row(png, row.data());
    }
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
  }
  std::filesystem::rename(tmp, path);
}

Image read_png16(const std::filesystem::path& path) {
  FilePtr fp(std::fopen(path.string().c_str(), "rb"));
  if (!fp) fail(path, "cannot open for reading");
  png_structp png =
      png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail(path, "libpng init failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail(path, "not a readable PNG");
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);

  const png_uint_32 w = png_get_image_width(png, info);
  const png_uint_32 h = png_get_image_height(png, info);
  const int color = png_get_color_type(png, info);
  int depth = png_get_bit_depth(png, info);
  if (color != PNG_COLOR_TYPE_GRAY || (depth != 16 && depth != 8)) {
    png_destroy_read_struct(&png, &info, nullptr);
    fail(path, "expected 8/16-bit grayscale PNG");
  }
  // Read raw rows; 16-bit stays big-endian as written.
  png_read_update_info(png, info);
  const size_t rowbytes = png_get_rowbytes(png, info);
  std::vector<std::uint8_t> row(rowbytes);

  Image img(static_cast<Eigen::Index>(h), static_cast<Eigen::Index>(w));
  for (png_uint_32 r = 0; r < h; ++r) {
    png_read_row(png, row.data(), nullptr);
    for (png_uint_32 c = 0; c < w; ++c) {
      std::uint16_t q;
      if (depth == 16) {
        q = static_cast<std::uint16_t>((row[2 * c] << 8) | row[2 * c + 1]);
      } else {
        q = static_cast<std::uint16_t>(row[c] * 257);  // 8-bit widened
      }
      img(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) =
          dequantize16(q);
    }
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

RgbImage RgbImage::from_gray(const Image& img) {
  RgbImage out;
  out.height = static_cast<int>(img.rows());
  out.width = static_cast<int>(img.cols());
  out.data.resize(static_cast<size_t>(out.height) * out.width * 3);
  for (int r = 0; r < out.height; ++r)
    for (int c = 0; c < out.width; ++c) {
      const auto v = static_cast<std::uint8_t>(
          std::lround(std::clamp(img(r, c), 0.0f, 1.0f) * 255.0f));
      out.set(r, c, v, v, v);
    }
  return out;
}

void RgbImage::set(int r, int c, std::uint8_t red, std::uint8_t green,
                   std::uint8_t blue) {
  if (r < 0 || r >= height || c < 0 || c >= width) return;
  const size_t i = (static_cast<size_t>(r) * width + c) * 3;
  data[i] = red;
  data[i + 1] = green;
  data[i + 2] = blue;
}

void RgbImage::draw_box_outline(const BBox& box, std::uint8_t red,
                                std::uint8_t green, std::uint8_t blue,
                                int thickness) {
  const auto [x0, y0, x1, y1] = box.iround();
  for (int t = 0; t < thickness; ++t) {
    for (int c = x0; c < x1; ++c) {
      set(y0 + t, c, red, green, blue);
      set(y1 - 1 - t, c, red, green, blue);
    }
    for (int r = y0; r < y1; ++r) {
      set(r, x0 + t, red, green, blue);
      set(r, x1 - 1 - t, red, green, blue);
    }
  }
}

void write_png_rgb8(const std::filesystem::path& path, const RgbImage& img) {
  if (img.height <= 0 || img.width <= 0)
    throw std::invalid_argument("write_png_rgb8: empty image");
  const std::filesystem::path tmp = path.string() + ".tmp";
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  {
    FilePtr fp(std::fopen(tmp.string().c_str(), "wb"));
    if (!fp) fail(tmp, "cannot open for writing");
    png_structp png =
        png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    png_infop info = png ? png_create_info_struct(png) : nullptr;
    if (!png || !info) {
      png_destroy_write_struct(&png, &info);
      fail(tmp, "libpng init failed");
    }
    if (setjmp(png_jmpbuf(png))) {
      png_destroy_write_struct(&png, &info);
      fail(tmp, "libpng write error");
    }
    png_init_io(png, fp.get());
    png_set_IHDR(png, info, img.width, img.height, 8, PNG_COLOR_TYPE_RGB,
                 PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);
    for (int r = 0; r < img.height; ++r)
      png_write_row(png, const_cast<png_bytep>(
                             img.data.data() + static_cast<size_t>(r) *
                                                   img.width * 3));
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace sslseg
