#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <sstream>
#include <stdexcept>
#include <vector>

#include "sslseg/bbox.hpp"

namespace sslseg {

/// Single-channel raster with values in [0,1]; (row, col) = (y, x).
/// Row-major storage so flat views match the on-disk pixel order.
template <class S>
using ImageT = Eigen::Array<S, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Image = ImageT<float>;
using MaskImage = ImageT<std::uint8_t>;  // binary 0/1

inline void check_image_nonempty(Eigen::Index h, Eigen::Index w,
                                 const char* who) {
  if (h <= 0 || w <= 0) {
    std::ostringstream os;
    os << who << ": non-positive dims " << h << "x" << w;
    throw std::invalid_argument(os.str());
  }
}

template <class S>
bool in_unit_range(const ImageT<S>& img) {
  return img.isFinite().all() && (img >= S(0)).all() && (img <= S(1)).all();
}

/// Validates that `box` addresses whole pixels inside an h x w image.
inline void check_pixel_box(const BBox& box, Eigen::Index h, Eigen::Index w,
                            const char* who) {
  if (!box.integral()) {
    std::ostringstream os;
    os << who << ": box has non-integer coordinates " << box.str();
    throw std::invalid_argument(os.str());
  }
  if (!box.valid_in(static_cast<int>(w), static_cast<int>(h))) {
    std::ostringstream os;
    os << who << ": box " << box.str() << " out of bounds for image " << w
       << "x" << h;
    throw std::invalid_argument(os.str());
  }
}

/// Copy of the pixels under a half-open box: output (r,c) = source (y0+r, x0+c).
template <class S>
ImageT<S> crop(const ImageT<S>& img, const BBox& box) {
  check_pixel_box(box, img.rows(), img.cols(), "crop");
  const auto [x0, y0, x1, y1] = box.iround();
  return img.block(y0, x0, y1 - y0, x1 - x0);
}

/// Writes `patch` into `img` with its top-left corner at (y0, x0) of `box`.
/// The patch dims must equal the box dims.
template <class S>
void paste(ImageT<S>& img, const ImageT<S>& patch, const BBox& box) {
  check_pixel_box(box, img.rows(), img.cols(), "paste");
  const auto [x0, y0, x1, y1] = box.iround();
  if (patch.rows() != y1 - y0 || patch.cols() != x1 - x0) {
    std::ostringstream os;
    os << "paste: patch " << patch.rows() << "x" << patch.cols()
       << " does not match box " << box.str();
    throw std::invalid_argument(os.str());
  }
  img.block(y0, x0, patch.rows(), patch.cols()) = patch;
}

/// Bilinear resampling, corner-aligned: output sample j maps to input
/// position j*(in-1)/(out-1), so the first/last samples hit the exact input
/// corners. Resizing to the same dims is bit-identical; a constant image
/// stays constant because interpolation is evaluated as a + f*(b-a).
template <class S>
ImageT<S> resize_bilinear(const ImageT<S>& img, Eigen::Index out_h,
                          Eigen::Index out_w) {
  check_image_nonempty(img.rows(), img.cols(), "resize_bilinear: input");
  if (out_h < 1 || out_w < 1) {
    std::ostringstream os;
    os << "resize_bilinear: non-positive target dims " << out_h << "x" << out_w;
    throw std::invalid_argument(os.str());
  }
  const Eigen::Index in_h = img.rows(), in_w = img.cols();
  ImageT<S> out(out_h, out_w);
  const double sy = out_h > 1 ? double(in_h - 1) / double(out_h - 1) : 0.0;
  const double sx = out_w > 1 ? double(in_w - 1) / double(out_w - 1) : 0.0;
  for (Eigen::Index i = 0; i < out_h; ++i) {
    const double y = out_h > 1 ? i * sy : 0.5 * (in_h - 1);
    const Eigen::Index y0 = std::min<Eigen::Index>(
        static_cast<Eigen::Index>(std::floor(y)), in_h - 1);
    const Eigen::Index y1 = std::min<Eigen::Index>(y0 + 1, in_h - 1);
    const S fy = static_cast<S>(y - static_cast<double>(y0));
    for (Eigen::Index j = 0; j < out_w; ++j) {
      const double x = out_w > 1 ? j * sx : 0.5 * (in_w - 1);
      const Eigen::Index x0 = std::min<Eigen::Index>(
          static_cast<Eigen::Index>(std::floor(x)), in_w - 1);
      const Eigen::Index x1 = std::min<Eigen::Index>(x0 + 1, in_w - 1);
      const S fx = static_cast<S>(x - static_cast<double>(x0));
      const S top = img(y0, x0) + fx * (img(y0, x1) - img(y0, x0));
      const S bot = img(y1, x0) + fx * (img(y1, x1) - img(y1, x0));
      out(i, j) = std::clamp<S>(top + fy * (bot - top), S(0), S(1));
    }
  }
  return out;
}

/// Reflect-101 index fold (…cb|abc|ba…) used at image borders.
inline Eigen::Index reflect_index(Eigen::Index i, Eigen::Index n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * (n - 1) - i;
  }
  return i;
}

/// Normalized discrete Gaussian taps, radius = max(1, ceil(3*sigma)).
inline std::vector<double> gaussian_kernel(double sigma) {
  if (!(sigma > 0.0))
    throw std::invalid_argument("gaussian_kernel: sigma must be positive");
  const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
  std::vector<double> k(2 * radius + 1);
  double sum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
    sum += k[i + radius];
  }
  for (double& v : k) v /= sum;
  return k;
}

/// Gaussian-blurs the pixels inside `box`, leaving everything else untouched.
/// The convolution reads from the full image, so the blur blends smoothly
/// with the surrounding content; reflect-101 padding applies only where the
/// kernel support leaves the image itself.
template <class S>
ImageT<S> blur_region(const ImageT<S>& img, const BBox& box, double sigma) {
  check_pixel_box(box, img.rows(), img.cols(), "blur_region");
  const auto kernel = gaussian_kernel(sigma);
  const Eigen::Index radius = static_cast<Eigen::Index>(kernel.size() / 2);
  const auto [x0, y0, x1, y1] = box.iround();
  const Eigen::Index bw = x1 - x0, bh = y1 - y0;

  // Horizontal pass over the rows the vertical pass will need.
  ImageT<double> hpass(bh + 2 * radius, bw);
  for (Eigen::Index r = 0; r < hpass.rows(); ++r) {
    const Eigen::Index sy = reflect_index(y0 - radius + r, img.rows());
    for (Eigen::Index c = 0; c < bw; ++c) {
      double acc = 0.0;
      for (Eigen::Index t = -radius; t <= radius; ++t) {
        const Eigen::Index sx = reflect_index(x0 + c + t, img.cols());
        acc += kernel[t + radius] * static_cast<double>(img(sy, sx));
      }
      hpass(r, c) = acc;
    }
  }
  ImageT<S> out = img;
  for (Eigen::Index r = 0; r < bh; ++r)
    for (Eigen::Index c = 0; c < bw; ++c) {
      double acc = 0.0;
      for (Eigen::Index t = -radius; t <= radius; ++t)
        acc += kernel[t + radius] * hpass(r + radius + t, c);
      out(y0 + r, x0 + c) = std::clamp(static_cast<S>(acc), S(0), S(1));
    }
  return out;
}

}  // namespace sslseg
