#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <sstream>
#include <stdexcept>

namespace sslseg {

/// Axis-aligned box, half-open convention [x0,x1) x [y0,y1).
///
/// Coordinates are stored as doubles: dataset boxes are integral, boxes
/// decoded from network regressions are not. Half-open semantics make
/// area(box) = width*height with no +-1 adjustments anywhere.
struct BBox {
  double x0 = 0.0, y0 = 0.0, x1 = 0.0, y1 = 0.0;

  double width() const { return x1 - x0; }
  double height() const { return y1 - y0; }
  double area() const { return width() * height(); }
  double cx() const { return 0.5 * (x0 + x1); }
  double cy() const { return 0.5 * (y0 + y1); }

  bool valid() const { return x0 < x1 && y0 < y1; }
  bool valid_in(int img_w, int img_h) const {
    return valid() && x0 >= 0.0 && y0 >= 0.0 && x1 <= img_w && y1 <= img_h;
  }
  bool integral() const {
    return x0 == std::floor(x0) && y0 == std::floor(y0) &&
           x1 == std::floor(x1) && y1 == std::floor(y1);
  }

  std::array<int, 4> iround() const {
    return {static_cast<int>(std::lround(x0)), static_cast<int>(std::lround(y0)),
            static_cast<int>(std::lround(x1)), static_cast<int>(std::lround(y1))};
  }

  bool operator==(const BBox& o) const {
    return x0 == o.x0 && y0 == o.y0 && x1 == o.x1 && y1 == o.y1;
  }

  std::string str() const {
    std::ostringstream os;
    os << "[" << x0 << "," << y0 << "," << x1 << "," << y1 << "]";
    return os.str();
  }
};

inline double intersection_area(const BBox& a, const BBox& b) {
  const double w = std::min(a.x1, b.x1) - std::max(a.x0, b.x0);
  const double h = std::min(a.y1, b.y1) - std::max(a.y0, b.y0);
  return (w > 0.0 && h > 0.0) ? w * h : 0.0;
}

/// Intersection over union; 0 for disjoint boxes, 1 iff equal.
inline double iou(const BBox& a, const BBox& b) {
  const double inter = intersection_area(a, b);
  if (inter <= 0.0) return 0.0;
  return inter / (a.area() + b.area() - inter);
}

inline BBox clip_box(const BBox& b, int img_w, int img_h) {
  return {std::clamp(b.x0, 0.0, static_cast<double>(img_w)),
          std::clamp(b.y0, 0.0, static_cast<double>(img_h)),
          std::clamp(b.x1, 0.0, static_cast<double>(img_w)),
          std::clamp(b.y1, 0.0, static_cast<double>(img_h))};
}

struct BoxDeltas {
  double tx = 0.0, ty = 0.0, tw = 0.0, th = 0.0;
};

/// R-CNN box parameterization: tx=(cx-cxa)/wa, ty=(cy-cya)/ha,
/// tw=log(w/wa), th=log(h/ha).
inline BoxDeltas encode_box(const BBox& anchor, const BBox& gt) {
  if (anchor.width() <= 0.0 || anchor.height() <= 0.0)
    throw std::invalid_argument("encode_box: non-positive anchor dims " +
                                anchor.str());
  if (gt.width() <= 0.0 || gt.height() <= 0.0)
    throw std::invalid_argument("encode_box: non-positive gt dims " + gt.str());
  return {(gt.cx() - anchor.cx()) / anchor.width(),
          (gt.cy() - anchor.cy()) / anchor.height(),
          std::log(gt.width() / anchor.width()),
          std::log(gt.height() / anchor.height())};
}

/// Inverse of encode_box. The caller clips to the image where needed.
inline BBox decode_box(const BBox& anchor, const BoxDeltas& d) {
  if (anchor.width() <= 0.0 || anchor.height() <= 0.0)
    throw std::invalid_argument("decode_box: non-positive anchor dims " +
                                anchor.str());
  const double cx = anchor.cx() + d.tx * anchor.width();
  const double cy = anchor.cy() + d.ty * anchor.height();
  const double w = anchor.width() * std::exp(d.tw);
  const double h = anchor.height() * std::exp(d.th);
  return {cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h};
}

}  // namespace sslseg
