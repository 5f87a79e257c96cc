#include "sslseg/net_config.hpp"

#include <stdexcept>

#include <nlohmann/json.hpp>

#include "sslseg/json_util.hpp"

namespace sslseg {

Phase phase_from_name(const std::string& s) {
  if (s == "pretext") return Phase::kPretext;
  if (s == "downstream") return Phase::kDownstream;
  throw std::invalid_argument("unknown phase \"" + s + "\"");
}

void NetConfig::validate() const {
  if (input_size < 32 || input_size % kStride != 0)
    throw std::invalid_argument(
        "net: input_size must be a positive multiple of 8");
  for (const int c : backbone_channels)
    if (c < 1) throw std::invalid_argument("net: backbone channel < 1");
  if (anchor_sides.empty())
    throw std::invalid_argument("net: anchor_sides empty");
  for (const int a : anchor_sides)
    if (a < 1) throw std::invalid_argument("net: anchor side < 1");
  if (proposals_train < 1 || proposals_infer < 1)
    throw std::invalid_argument("net: proposal counts must be >= 1");
  if (roi_pool < 2 || roi_pool % 2 != 0)
    throw std::invalid_argument("net: roi_pool must be even and >= 2");
  if (head_output != 2 * roi_pool)
    throw std::invalid_argument("net: head_output must equal 2 * roi_pool");
  if (num_pretext_classes < 1 || num_downstream_classes < 1)
    throw std::invalid_argument("net: class counts must be >= 1");
  const auto prob = [](double v) { return v >= 0.0 && v <= 1.0; };
  if (!prob(rpn_pos_iou) || !prob(rpn_neg_iou) || !prob(roi_pos_iou) ||
      !prob(nms_iou) || !prob(score_threshold_infer))
    throw std::invalid_argument("net: IoU/score thresholds must be in [0,1]");
  if (rpn_neg_iou > rpn_pos_iou)
    throw std::invalid_argument("net: rpn_neg_iou must be <= rpn_pos_iou");
}

void NetConfig::check_covers_sizes(int min_side, int max_side) const {
  int lo = anchor_sides[0], hi = anchor_sides[0];
  for (const int a : anchor_sides) {
    lo = std::min(lo, a);
    hi = std::max(hi, a);
  }
  if (lo > min_side || hi < max_side)
    throw std::invalid_argument(
        "net: anchor_sides [" + std::to_string(lo) + "," + std::to_string(hi) +
        "] do not cover the distortion size range [" +
        std::to_string(min_side) + "," + std::to_string(max_side) + "]");
}

nlohmann::json NetConfig::to_json() const {
  return nlohmann::json{
      {"input_size", input_size},
      {"backbone_channels",
       {backbone_channels[0], backbone_channels[1], backbone_channels[2]}},
      {"anchor_sides", anchor_sides},
      {"proposals_train", proposals_train},
      {"proposals_infer", proposals_infer},
      {"roi_pool", roi_pool},
      {"head_output", head_output},
      {"num_pretext_classes", num_pretext_classes},
      {"num_downstream_classes", num_downstream_classes},
      {"rpn_pos_iou", rpn_pos_iou},
      {"rpn_neg_iou", rpn_neg_iou},
      {"roi_pos_iou", roi_pos_iou},
      {"nms_iou", nms_iou},
      {"score_threshold_infer", score_threshold_infer},
      {"patch_head_skip", patch_head_skip}};
}

NetConfig NetConfig::from_json(const nlohmann::json& j) {
  check_json_keys(
      j, {"input_size", "backbone_channels", "anchor_sides", "proposals_train",
          "proposals_infer", "roi_pool", "head_output", "num_pretext_classes",
          "num_downstream_classes", "rpn_pos_iou", "rpn_neg_iou", "roi_pos_iou",
          "nms_iou", "score_threshold_infer", "patch_head_skip"},
      "net config");
  NetConfig c;
  c.input_size = json_get_or(j, "input_size", c.input_size);
  if (j.contains("backbone_channels")) {
    const auto& a = j["backbone_channels"];
    c.backbone_channels = {a.at(0).get<int>(), a.at(1).get<int>(),
                           a.at(2).get<int>()};
  }
  if (j.contains("anchor_sides"))
    c.anchor_sides = j["anchor_sides"].get<std::vector<int>>();
  c.proposals_train = json_get_or(j, "proposals_train", c.proposals_train);
  c.proposals_infer = json_get_or(j, "proposals_infer", c.proposals_infer);
  c.roi_pool = json_get_or(j, "roi_pool", c.roi_pool);
  c.head_output = json_get_or(j, "head_output", c.head_output);
  c.num_pretext_classes =
      json_get_or(j, "num_pretext_classes", c.num_pretext_classes);
  c.num_downstream_classes =
      json_get_or(j, "num_downstream_classes", c.num_downstream_classes);
  c.rpn_pos_iou = json_get_or(j, "rpn_pos_iou", c.rpn_pos_iou);
  c.rpn_neg_iou = json_get_or(j, "rpn_neg_iou", c.rpn_neg_iou);
  c.roi_pos_iou = json_get_or(j, "roi_pos_iou", c.roi_pos_iou);
  c.nms_iou = json_get_or(j, "nms_iou", c.nms_iou);
  c.score_threshold_infer =
      json_get_or(j, "score_threshold_infer", c.score_threshold_infer);
  c.patch_head_skip = json_get_or(j, "patch_head_skip", c.patch_head_skip);
  c.validate();
  return c;
}

}  // namespace sslseg
