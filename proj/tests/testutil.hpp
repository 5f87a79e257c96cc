#pragma once

#include <filesystem>
#include <string>

#include "sslseg/image.hpp"
#include "sslseg/rng.hpp"

namespace sslseg::test {

inline Image random_image(Rng& rng, int h, int w) {
  Image img(h, w);
  for (int r = 0; r < h; ++r)
    for (int c = 0; c < w; ++c)
      img(r, c) = static_cast<float>(rng.uniform());
  return img;
}

inline bool images_equal(const Image& a, const Image& b) {
  return a.rows() == b.rows() && a.cols() == b.cols() && (a == b).all();
}

inline double max_abs_diff(const Image& a, const Image& b) {
  return (a - b).abs().maxCoeff();
}

/// Unique scratch directory, removed on destruction.
struct TempDir {
  std::filesystem::path path;
  explicit TempDir(const std::string& tag) {
    path = std::filesystem::temp_directory_path() /
           ("sslseg_" + tag + "_" + std::to_string(::getpid()) + "_" +
            std::to_string(counter()++));
    std::filesystem::create_directories(path);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path, ec);
  }
  static int& counter() {
    static int c = 0;
    return c;
  }
};

}  // namespace sslseg::test
