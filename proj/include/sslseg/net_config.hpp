#pragma once

#include <array>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

namespace sslseg {

enum class Phase { kPretext, kDownstream };

inline const char* phase_name(Phase p) {
  return p == Phase::kPretext ? "pretext" : "downstream";
}
Phase phase_from_name(const std::string& s);

/// Compact two-stage detector configuration. Single stride-8 feature level;
/// the restoration/mask head upsamples roi_pool to head_output = 2*roi_pool.
struct NetConfig {
  int input_size = 320;
  std::array<int, 3> backbone_channels = {16, 32, 64};
  std::vector<int> anchor_sides = {48, 64, 80};
  int proposals_train = 64;
  int proposals_infer = 32;
  int roi_pool = 14;
  int head_output = 28;
  int num_pretext_classes = 6;
  int num_downstream_classes = 1;
  double rpn_pos_iou = 0.7;
  double rpn_neg_iou = 0.3;
  double roi_pos_iou = 0.5;
  double nms_iou = 0.7;
  double score_threshold_infer = 0.5;
  bool patch_head_skip = true;  // skip connection + extra encoder layer

  static constexpr int kStride = 8;

  int feature_size() const { return input_size / kStride; }

  void validate() const;
  /// Anchors must bracket the distortion box sizes.
  void check_covers_sizes(int min_side, int max_side) const;

  nlohmann::json to_json() const;
  static NetConfig from_json(const nlohmann::json& j);
};

}  // namespace sslseg
