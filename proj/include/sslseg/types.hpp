#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "sslseg/bbox.hpp"
#include "sslseg/image.hpp"

namespace sslseg {

/// The six-type corruption pool. Codes are part of the dataset schema and
/// must stay stable across serialization.
enum class DistortionType : int {
  kBlank = 1,
  kBlurred = 2,
  kMislocate = 3,
  kSaltPepper = 4,
  kRotate = 5,
  kSpeckle = 6,
};

constexpr int kNumDistortionTypes = 6;

inline bool distortion_code_valid(int code) { return code >= 1 && code <= 6; }

inline DistortionType distortion_from_code(int code) {
  if (!distortion_code_valid(code))
    throw std::invalid_argument("unknown distortion code " +
                                std::to_string(code));
  return static_cast<DistortionType>(code);
}

inline const char* distortion_name(DistortionType t) {
  switch (t) {
    case DistortionType::kBlank: return "blank";
    case DistortionType::kBlurred: return "blurred";
    case DistortionType::kMislocate: return "mislocate";
    case DistortionType::kSaltPepper: return "salt_pepper";
    case DistortionType::kRotate: return "rotate";
    case DistortionType::kSpeckle: return "speckle";
  }
  throw std::invalid_argument("unknown distortion type");
}

/// One applied corruption: what was done, where, and the pristine pixels
/// needed to undo it. `params` holds the scalar draws by name (blur "sigma",
/// salt&pepper "fraction", speckle "sigma", rotate "quarter_turns",
/// mislocate "src_x0"/"src_y0").
struct DistortionRecord {
  DistortionType dtype = DistortionType::kBlank;
  BBox box;
  MaskImage region_mask;   // image-sized, 1 inside box
  Image original_patch;    // box-sized crop of the pre-distortion image
  std::map<std::string, double> params;
};

/// Pretext training unit: a distorted image plus full ground truth.
struct AnnotatedSample {
  std::string sample_id;
  Image distorted;
  std::string original_ref;  // dataset path of the pristine image
  std::vector<DistortionRecord> records;
  std::uint64_t seed = 0;
};

struct SegInstance {
  int class_id = 1;
  BBox box;
  MaskImage mask;  // image-sized, 1 on the instance
};

/// Downstream training unit: image plus instance masks/boxes.
struct SegSample {
  std::string sample_id;
  Image image;
  std::vector<SegInstance> instances;
};

/// Throws unless the mask is exactly 1 inside `box` and 0 elsewhere.
inline void check_mask_matches_box(const MaskImage& mask, const BBox& box,
                                   Eigen::Index h, Eigen::Index w,
                                   const std::string& who) {
  if (mask.rows() != h || mask.cols() != w)
    throw std::invalid_argument(who + ": region mask dims mismatch image");
  const auto [x0, y0, x1, y1] = box.iround();
  for (Eigen::Index r = 0; r < h; ++r)
    for (Eigen::Index c = 0; c < w; ++c) {
      const bool inside = r >= y0 && r < y1 && c >= x0 && c < x1;
      if ((mask(r, c) != 0) != inside)
        throw std::invalid_argument(who +
                                    ": region mask support differs from box " +
                                    box.str());
    }
}

inline MaskImage mask_from_box(const BBox& box, Eigen::Index h,
                               Eigen::Index w) {
  MaskImage m = MaskImage::Zero(h, w);
  const auto [x0, y0, x1, y1] = box.iround();
  m.block(y0, x0, y1 - y0, x1 - x0).setConstant(1);
  return m;
}

/// Tight bounding box of a nonempty binary mask (half-open).
inline BBox tight_box(const MaskImage& mask) {
  Eigen::Index rmin = mask.rows(), rmax = -1, cmin = mask.cols(), cmax = -1;
  for (Eigen::Index r = 0; r < mask.rows(); ++r)
    for (Eigen::Index c = 0; c < mask.cols(); ++c)
      if (mask(r, c) != 0) {
        rmin = std::min(rmin, r);
        rmax = std::max(rmax, r);
        cmin = std::min(cmin, c);
        cmax = std::max(cmax, c);
      }
  if (rmax < 0) throw std::invalid_argument("tight_box: empty mask");
  return {static_cast<double>(cmin), static_cast<double>(rmin),
          static_cast<double>(cmax + 1), static_cast<double>(rmax + 1)};
}

}  // namespace sslseg
