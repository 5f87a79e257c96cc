#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "sslseg/rng.hpp"
#include "sslseg/types.hpp"

namespace sslseg {

enum class OverlapPolicy { kRejectOverlap, kAllow };

/// Ranges governing how many regions get corrupted, how big they are, and
/// the per-type parameter draws.
struct DistortionConfig {
  std::pair<int, int> count_range = {3, 7};
  std::pair<int, int> size_range = {50, 80};
  std::pair<double, double> blur_sigma = {1.5, 4.0};
  std::pair<double, double> sp_fraction = {0.05, 0.25};
  std::pair<double, double> speckle_sigma = {0.2, 0.5};
  std::vector<int> rotate_quarter_turns = {1, 2, 3};
  OverlapPolicy overlap_policy = OverlapPolicy::kRejectOverlap;

  void validate() const;
  nlohmann::json to_json() const;
  static DistortionConfig from_json(const nlohmann::json& j);
};

struct PlannedDistortion {
  DistortionType dtype = DistortionType::kBlank;
  BBox box;
  std::map<std::string, double> params;
};

/// Where and how one image will be corrupted. Applying the same plan to the
/// same image is bit-deterministic: all apply-time randomness (noise pixels,
/// mislocate source) is keyed off source_seed.
struct DistortionPlan {
  std::vector<PlannedDistortion> items;
  std::uint64_t source_seed = 0;
};

/// Draws a plan: K ~ uniform over count_range, types uniform over the
/// 6-type pool with replacement, box sides uniform over size_range (rotate
/// boxes are square so quarter turns stay interpolation-free). Under
/// reject_overlap boxes are pairwise disjoint, found by bounded rejection
/// sampling with shrink-and-retry.
DistortionPlan sample_plan(Rng& rng, const DistortionConfig& cfg, int img_h,
                           int img_w);

/// Applies one corruption to a copy of `img`, touching only the pixels
/// inside `box`; output stays in [0,1]. Scalar draws made here (e.g. the
/// mislocate source corner) are appended to *drawn when provided.
Image apply_distortion(const Image& img, const BBox& box, DistortionType dtype,
                       const std::map<std::string, double>& params, Rng& rng,
                       std::map<std::string, double>* drawn = nullptr);

/// Runs the full plan in order against a pristine image and collects the
/// pretext ground truth. Records crop their restoration patches from the
/// pre-distortion image, so pasting them back undoes everything when boxes
/// are disjoint.
AnnotatedSample distort_sample(const Image& original,
                               const DistortionPlan& plan);

/// Side-by-side figure: original | distorted | distorted with labeled boxes.
void write_preview(const Image& original, const AnnotatedSample& sample,
                   const std::filesystem::path& path);

}  // namespace sslseg
