#pragma once

#include <algorithm>
#include <cstring>
#include <map>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "sslseg/autodiff.hpp"
#include "sslseg/checkpoint.hpp"
#include "sslseg/dataset.hpp"
#include "sslseg/detection.hpp"
#include "sslseg/image.hpp"
#include "sslseg/losses.hpp"
#include "sslseg/net_config.hpp"
#include "sslseg/rng.hpp"

namespace sslseg {

/// Greedy non-maximum suppression by descending score; deterministic
/// tie-break (score, x0, y0, input order). Survivors have pairwise IoU
/// <= threshold with every earlier survivor.
inline std::vector<Detection> nms(const std::vector<Detection>& dets,
                                  double iou_threshold) {
  std::vector<int> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int i, int j) {
    if (dets[i].score != dets[j].score) return dets[i].score > dets[j].score;
    if (dets[i].box.x0 != dets[j].box.x0) return dets[i].box.x0 < dets[j].box.x0;
    if (dets[i].box.y0 != dets[j].box.y0) return dets[i].box.y0 < dets[j].box.y0;
    return i < j;
  });
  std::vector<Detection> kept;
  for (const int i : order) {
    if (!std::isfinite(dets[i].score))
      throw std::invalid_argument("nms: non-finite score");
    bool suppressed = false;
    for (const auto& k : kept)
      if (iou(dets[i].box, k.box) > iou_threshold) {
        suppressed = true;
        break;
      }
    if (!suppressed) kept.push_back(dets[i]);
  }
  return kept;
}

/// Paints detection patches back into a copy of the distorted image,
/// ascending score order so the highest-score prediction wins overlaps.
/// Patches are resized to their (rounded, clipped) boxes; a patch already
/// at box size passes through bit-exactly.
inline Image recover_image(const Image& distorted,
                           const std::vector<Detection>& dets) {
  Image out = distorted;
  const int w = static_cast<int>(out.cols()), h = static_cast<int>(out.rows());
  std::vector<int> order(dets.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int i, int j) {
    if (dets[i].score != dets[j].score) return dets[i].score < dets[j].score;
    if (dets[i].box.x0 != dets[j].box.x0) return dets[i].box.x0 < dets[j].box.x0;
    if (dets[i].box.y0 != dets[j].box.y0) return dets[i].box.y0 < dets[j].box.y0;
    return i < j;
  });
  for (const int i : order) {
    auto [x0, y0, x1, y1] = dets[i].box.iround();
    x0 = std::clamp(x0, 0, w);
    x1 = std::clamp(x1, 0, w);
    y0 = std::clamp(y0, 0, h);
    y1 = std::clamp(y1, 0, h);
    if (x1 - x0 < 1 || y1 - y0 < 1) continue;
    const BBox ibox{static_cast<double>(x0), static_cast<double>(y0),
                    static_cast<double>(x1), static_cast<double>(y1)};
    paste(out, resize_bilinear(dets[i].patch, y1 - y0, x1 - x0), ibox);
  }
  return out;
}

/// Compact two-stage region network: shared conv backbone at stride 8, an
/// RPN over {anchor_sides} square anchors, a classification/box tower, and
/// a restoration/mask patch head with an extra encoder layer plus a skip
/// connection (the patch_head_skip ablation flag removes both).
template <typename T>
class Net {
 public:
  using Id = typename Tape<T>::Id;

  struct GtInstance {
    int class_id = 1;        // pretext: distortion code 1..6; downstream: 1
    BBox box;
    Tensor<T> patch_target;  // {head_output^2}, the box content at 28x28
  };

  struct TrainBatch {
    std::vector<const Image*> images;
    std::vector<std::vector<GtInstance>> gts;  // per image
  };

  /// The discrete decisions of one training step: which anchors were
  /// sampled, which proposals became RoIs and their matched targets.
  /// Boxes here are constants for the gradient: two-stage training stops
  /// gradient through proposal coordinates, so the loss is differentiable
  /// exactly when the plan is held fixed.
  struct RoiPlan {
    std::vector<std::int64_t> anchor_obj_indices;  // into the rpn obj map
    std::vector<T> anchor_obj_targets;
    std::vector<std::int64_t> anchor_box_indices;  // 4 per positive anchor
    std::vector<T> anchor_box_targets;
    struct PlannedRoi {
      int image = 0;
      BBox box;
      int cls_target = 0;
      int gt_index = -1;  // >= 0 for positives
    };
    std::vector<PlannedRoi> rois;
    std::vector<std::pair<int, int>> patch_refs;  // (image, gt index)
  };

  struct TrainOutputs {
    LossInputs<T> loss;
    RoiPlan plan;
    // per positive sampled RoI, for diagnostics (type accuracy etc.)
    std::vector<int> pos_gt_class;
    std::vector<int> pos_pred_class;
  };

  Net(NetConfig cfg, Phase phase, std::uint64_t init_seed)
      : cfg_(std::move(cfg)), phase_(phase), init_seed_(init_seed) {
    cfg_.validate();
    if (cfg_.backbone_channels[2] % 4 != 0)
      throw std::invalid_argument("net: top backbone width must be div by 4");
    build();
  }

  const NetConfig& config() const { return cfg_; }
  Phase phase() const { return phase_; }
  int num_classes() const {
    return phase_ == Phase::kPretext ? cfg_.num_pretext_classes
                                     : cfg_.num_downstream_classes;
  }

  // ---- parameters --------------------------------------------------------

  std::size_t param_count() const { return params_.size(); }

  std::vector<Tensor<T>*> param_values() {
    std::vector<Tensor<T>*> out;
    for (auto& p : params_) out.push_back(&p.value);
    return out;
  }

  const std::string& param_name(std::size_t i) const { return params_[i].name; }
  Tensor<T>& param(std::size_t i) { return params_[i].value; }

  std::int64_t scalar_param_count() const {
    std::int64_t n = 0;
    for (const auto& p : params_) n += p.value.size();
    return n;
  }

  NamedParams export_params() const {
    NamedParams out;
    for (const auto& p : params_) {
      std::vector<double> v(p.value.size());
      for (std::int64_t i = 0; i < p.value.size(); ++i)
        v[i] = static_cast<double>(p.value.v[i]);
      out.emplace_back(p.name, std::move(v));
    }
    return out;
  }

  /// Loads values by name. Names in skip_prefixes keep their current
  /// (freshly initialized) values; anything else missing or size-mismatched
  /// is an error.
  void import_params(const NamedParams& named,
                     const std::vector<std::string>& skip_prefixes = {}) {
    std::map<std::string, const std::vector<double>*> lookup;
    for (const auto& [name, values] : named) lookup[name] = &values;
    for (auto& p : params_) {
      bool skip = false;
      for (const auto& prefix : skip_prefixes)
        if (p.name.rfind(prefix, 0) == 0) skip = true;
      if (skip) continue;
      const auto it = lookup.find(p.name);
      if (it == lookup.end())
        throw std::runtime_error("checkpoint missing parameter " + p.name);
      if (static_cast<std::int64_t>(it->second->size()) != p.value.size())
        throw std::runtime_error("checkpoint size mismatch for " + p.name);
      for (std::int64_t i = 0; i < p.value.size(); ++i)
        p.value.v[i] = static_cast<T>((*it->second)[i]);
    }
  }

  /// FNV over the backbone parameter bit patterns; freeze tests compare it.
  std::uint64_t backbone_checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& p : params_) {
      if (p.name.rfind("backbone.", 0) != 0) continue;
      for (std::int64_t i = 0; i < p.value.size(); ++i) {
        const double d = static_cast<double>(p.value.v[i]);
        std::uint64_t bits;
        static_assert(sizeof(bits) == sizeof(d));
        std::memcpy(&bits, &d, sizeof(bits));
        h = (h ^ bits) * 0x100000001b3ull;
      }
    }
    return h;
  }

  /// Swaps to the downstream head layout: the class-count-dependent layers
  /// (classifier output, patch output conv) are reinitialized, everything
  /// else keeps its values.
  void switch_phase(Phase new_phase, std::uint64_t reinit_seed) {
    if (new_phase == phase_) return;
    const NamedParams keep = export_params();
    phase_ = new_phase;
    init_seed_ = reinit_seed;
    params_.clear();
    name_to_index_.clear();
    build();
    import_params(keep, {"head.cls.", "patch.out."});
  }

  std::vector<std::uint8_t> trainable_mask(bool freeze_backbone) const {
    std::vector<std::uint8_t> mask(params_.size(), 1);
    if (freeze_backbone)
      for (std::size_t i = 0; i < params_.size(); ++i)
        if (params_[i].name.rfind("backbone.", 0) == 0) mask[i] = 0;
    return mask;
  }

  // ---- anchors -----------------------------------------------------------

  const std::vector<BBox>& anchors() const { return anchors_; }

  // ---- training forward --------------------------------------------------

  /// Binds every parameter as a tape leaf. Frozen parameters become
  /// constant leaves, so no gradient work is spent behind them.
  void bind_params(Tape<T>& tape, bool freeze_backbone = false) {
    bound_.clear();
    const auto mask = trainable_mask(freeze_backbone);
    for (std::size_t i = 0; i < params_.size(); ++i)
      bound_.push_back(tape.leaf(params_[i].value, mask[i] != 0));
  }

  const std::vector<Id>& bound_param_ids() const { return bound_; }

  /// Full training-mode forward pass. Deterministic: positive RoIs are
  /// ranked by IoU and negatives by hardness (current score), so identical
  /// images produce identical per-image outputs.
  TrainOutputs forward_train(Tape<T>& tape, const TrainBatch& batch) {
    check_batch(batch);
    const Id feat = forward_backbone(tape, batch.images);
    const auto [rpn_obj, rpn_box] = forward_rpn(tape, feat);
    const RoiPlan plan =
        make_plan(batch, tape.val(rpn_obj), tape.val(rpn_box));
    return apply_plan(tape, batch, plan, feat, rpn_obj, rpn_box);
  }

  /// Forward pass with the RoI decisions pinned. The loss is smooth in the
  /// parameters along this path, which is what gradient checks probe.
  TrainOutputs forward_train_planned(Tape<T>& tape, const TrainBatch& batch,
                                     const RoiPlan& plan) {
    check_batch(batch);
    const Id feat = forward_backbone(tape, batch.images);
    const auto [rpn_obj, rpn_box] = forward_rpn(tape, feat);
    return apply_plan(tape, batch, plan, feat, rpn_obj, rpn_box);
  }

  // ---- inference ---------------------------------------------------------

  std::vector<Detection> forward_infer(const Image& image) {
    Tape<T> tape(false);
    bind_params(tape);
    check_image(image);
    const Id feat =
        forward_backbone(tape, std::vector<const Image*>{&image});
    const auto [rpn_obj, rpn_box] = forward_rpn(tape, feat);
    const auto props = make_proposals(tape.val(rpn_obj), tape.val(rpn_box), 0,
                                      cfg_.proposals_infer);
    if (props.empty()) return {};

    std::vector<typename Tape<T>::Roi> tape_rois;
    for (const auto& p : props) tape_rois.push_back({0, p.box});
    const Id feats =
        tape.roi_align(feat, tape_rois, cfg_.roi_pool, NetConfig::kStride);
    const auto [cls_logits, box_deltas] = forward_tower(tape, feats);
    const auto& logits = tape.val(cls_logits);
    const auto& deltas = tape.val(box_deltas);
    const int c_dim = logits.shape[1];

    std::vector<Detection> cands;
    for (std::size_t i = 0; i < props.size(); ++i) {
      // softmax over classes; pick the best non-background class
      T mx = logits.v[i * c_dim];
      for (int c = 1; c < c_dim; ++c)
        mx = std::max(mx, logits.v[i * c_dim + c]);
      double denom = 0.0;
      for (int c = 0; c < c_dim; ++c)
        denom += std::exp(static_cast<double>(logits.v[i * c_dim + c] - mx));
      int best_c = 1;
      double best_p = -1.0;
      for (int c = 1; c < c_dim; ++c) {
        const double p =
            std::exp(static_cast<double>(logits.v[i * c_dim + c] - mx)) / denom;
        if (p > best_p) {
          best_p = p;
          best_c = c;
        }
      }
      if (best_p < cfg_.score_threshold_infer) continue;
      const BoxDeltas d{static_cast<double>(deltas.v[i * 4 + 0]),
                        static_cast<double>(deltas.v[i * 4 + 1]),
                        static_cast<double>(deltas.v[i * 4 + 2]),
                        static_cast<double>(deltas.v[i * 4 + 3])};
      BBox box = clip_box(decode_box(props[i].box, d), cfg_.input_size,
                          cfg_.input_size);
      if (box.width() < 2.0 || box.height() < 2.0) continue;
      Detection det;
      det.box = box;
      det.class_id = best_c;
      det.score = best_p;
      cands.push_back(std::move(det));
    }
    std::vector<Detection> kept = nms(cands, cfg_.nms_iou);
    if (static_cast<int>(kept.size()) > cfg_.proposals_infer)
      kept.resize(cfg_.proposals_infer);
    if (kept.empty()) return kept;

    std::vector<typename Tape<T>::Roi> det_rois;
    for (const auto& d : kept) det_rois.push_back({0, d.box});
    const Id pfeat =
        tape.roi_align(feat, det_rois, cfg_.roi_pool, NetConfig::kStride);
    const Id patch = forward_patch_head(tape, pfeat);
    const auto& pv = tape.val(patch);
    const int ho = cfg_.head_output;
    for (std::size_t i = 0; i < kept.size(); ++i) {
      Image p(ho, ho);
      for (int r = 0; r < ho; ++r)
        for (int c = 0; c < ho; ++c)
          p(r, c) = static_cast<float>(
              pv.v[pv.idx4(static_cast<int>(i), 0, r, c)]);
      kept[i].patch = std::move(p);
    }
    return kept;
  }

  /// Backbone features of a batch, value-only (shape checks, probes).
  Tensor<T> backbone_features(const std::vector<const Image*>& images) {
    Tape<T> tape(false);
    bind_params(tape);
    for (const auto* img : images) check_image(*img);
    return tape.val(forward_backbone(tape, images));
  }

  /// Patch head on given RoI features, value-only.
  Tensor<T> run_patch_head(const Tensor<T>& roi_feats) {
    Tape<T> tape(false);
    bind_params(tape);
    return tape.val(forward_patch_head(tape, tape.leaf(roi_feats, false)));
  }

  /// Resamples box content (an original_patch or a binary instance mask)
  /// into the flat head-output target the patch head regresses to.
  static Tensor<T> patch_target_from_image(const Image& content, int head) {
    const Image resized = resize_bilinear(content, head, head);
    Tensor<T> out({head * head});
    for (int r = 0; r < head; ++r)
      for (int c = 0; c < head; ++c)
        out.v[static_cast<std::int64_t>(r) * head + c] =
            static_cast<T>(resized(r, c));
    return out;
  }

  static constexpr int kPatchRoisPerImage = 8;
  static constexpr int kRpnSamplesPerImage = 64;
  static constexpr int kRpnMaxPositives = 32;
  static constexpr int kPreNmsProposals = 256;

 private:
  struct Param {
    std::string name;
    Tensor<T> value;
  };

  struct ConvHandle {
    int w = -1, b = -1;
    int stride = 1, pad = 1;
  };
  struct DenseHandle {
    int w = -1, b = -1;
  };

  void check_image(const Image& img) const {
    if (img.rows() != cfg_.input_size || img.cols() != cfg_.input_size)
      throw std::invalid_argument(
          "net: image dims " + std::to_string(img.cols()) + "x" +
          std::to_string(img.rows()) + " do not match input_size " +
          std::to_string(cfg_.input_size));
  }

  void check_batch(const TrainBatch& batch) const {
    if (batch.images.empty())
      throw std::invalid_argument("net: empty batch");
    if (batch.images.size() != batch.gts.size())
      throw std::invalid_argument("net: images/targets length mismatch");
    for (const auto* img : batch.images) check_image(*img);
    if (bound_.empty())
      throw std::logic_error("net: bind_params must run before forward");
  }

  int add_param(const std::string& name, std::vector<int> shape,
                double he_fan_in) {
    Param p;
    p.name = name;
    p.value = Tensor<T>::zeros(std::move(shape));
    if (he_fan_in > 0.0) {
      Rng rng(init_seed_, fnv1a64(name));
      const double std_dev = std::sqrt(2.0 / he_fan_in);
      for (std::int64_t i = 0; i < p.value.size(); ++i)
        p.value.v[i] = static_cast<T>(rng.normal(0.0, std_dev));
    }
    params_.push_back(std::move(p));
    name_to_index_[name] = static_cast<int>(params_.size()) - 1;
    return static_cast<int>(params_.size()) - 1;
  }

  ConvHandle add_conv(const std::string& name, int cin, int cout, int k,
                      int stride, int pad) {
    ConvHandle h;
    h.w = add_param(name + ".w", {cout, cin, k, k},
                    static_cast<double>(cin) * k * k);
    h.b = add_param(name + ".b", {cout}, 0.0);
    h.stride = stride;
    h.pad = pad;
    return h;
  }

  DenseHandle add_dense(const std::string& name, int fin, int fout) {
    DenseHandle h;
    h.w = add_param(name + ".w", {fin, fout}, static_cast<double>(fin));
    h.b = add_param(name + ".b", {fout}, 0.0);
    return h;
  }

  void build() {
    const auto [c1, c2, c3] = cfg_.backbone_channels;
    backbone_ = {
        add_conv("backbone.c1", 1, c1, 3, 2, 1),
        add_conv("backbone.c2", c1, c1, 3, 1, 1),
        add_conv("backbone.c3", c1, c2, 3, 2, 1),
        add_conv("backbone.c4", c2, c2, 3, 1, 1),
        add_conv("backbone.c5", c2, c3, 3, 2, 1),
        add_conv("backbone.c6", c3, c3, 3, 1, 1),
    };
    const int a_count = static_cast<int>(cfg_.anchor_sides.size());
    rpn_conv_ = add_conv("rpn.conv", c3, c3, 3, 1, 1);
    rpn_obj_ = add_conv("rpn.obj", c3, a_count, 1, 1, 0);
    rpn_box_ = add_conv("rpn.box", c3, 4 * a_count, 1, 1, 0);

    const int pooled = cfg_.roi_pool / 2;
    fc1_ = add_dense("head.fc1", c3 * pooled * pooled, kTowerWidth);
    fc_cls_ = add_dense("head.cls", kTowerWidth, num_classes() + 1);
    fc_box_ = add_dense("head.box", kTowerWidth, 4);

    const int ph = c3 / 2, pq = c3 / 4;
    patch_pre_ = add_conv("patch.pre", c3, ph, 3, 1, 1);
    if (cfg_.patch_head_skip) {
      patch_enc_ = add_conv("patch.enc", ph, c3, 3, 2, 1);
      patch_dec1_ = add_conv("patch.dec1", c3, ph, 3, 1, 1);
      patch_merge_ = add_conv("patch.merge", 2 * ph, ph, 3, 1, 1);
    }
    patch_dec2_ = add_conv("patch.dec2", ph, pq, 3, 1, 1);
    patch_out_ = add_conv("patch.out", pq, 1, 1, 1, 0);

    anchors_.clear();
    const int fsz = cfg_.feature_size();
    for (int r = 0; r < fsz; ++r)
      for (int c = 0; c < fsz; ++c)
        for (const int side : cfg_.anchor_sides) {
          const double cx = (c + 0.5) * NetConfig::kStride;
          const double cy = (r + 0.5) * NetConfig::kStride;
          anchors_.push_back({cx - side / 2.0, cy - side / 2.0,
                              cx + side / 2.0, cy + side / 2.0});
        }
  }

  Id conv(Tape<T>& tape, const ConvHandle& h, Id x) const {
    return tape.conv2d(x, bound_[h.w], bound_[h.b], h.stride, h.pad);
  }

  Id dense(Tape<T>& tape, const DenseHandle& h, Id x) const {
    return tape.linear(x, bound_[h.w], bound_[h.b]);
  }

  Id forward_backbone(Tape<T>& tape, const std::vector<const Image*>& images) {
    const int n = static_cast<int>(images.size());
    const int s = cfg_.input_size;
    Tensor<T> input({n, 1, s, s});
    for (int ni = 0; ni < n; ++ni)
      for (int r = 0; r < s; ++r)
        for (int c = 0; c < s; ++c)
          input.v[input.idx4(ni, 0, r, c)] =
              static_cast<T>((*images[ni])(r, c));
    Id x = tape.leaf(std::move(input), false);
    for (const auto& layer : backbone_) x = tape.relu(conv(tape, layer, x));
    return x;
  }

  std::pair<Id, Id> forward_rpn(Tape<T>& tape, Id feat) {
    const Id h = tape.relu(conv(tape, rpn_conv_, feat));
    return {conv(tape, rpn_obj_, h), conv(tape, rpn_box_, h)};
  }

  std::pair<Id, Id> forward_tower(Tape<T>& tape, Id roi_feats) {
    const auto& shape = tape.val(roi_feats).shape;
    const Id pooled = tape.avgpool2(roi_feats);
    const auto& ps = tape.val(pooled).shape;
    const Id flat =
        tape.reshape(pooled, {shape[0], ps[1] * ps[2] * ps[3]});
    const Id hidden = tape.relu(dense(tape, fc1_, flat));
    return {dense(tape, fc_cls_, hidden), dense(tape, fc_box_, hidden)};
  }

  Id forward_patch_head(Tape<T>& tape, Id roi_feats) {
    const Id f0 = tape.relu(conv(tape, patch_pre_, roi_feats));
    Id x = f0;
    if (cfg_.patch_head_skip) {
      const Id enc = tape.relu(conv(tape, patch_enc_, f0));
      const Id up1 = tape.upsample2_nearest(enc);
      const Id dec1 = tape.relu(conv(tape, patch_dec1_, up1));
      x = tape.relu(conv(tape, patch_merge_, tape.concat_channels(dec1, f0)));
    }
    const Id up2 = tape.upsample2_nearest(x);
    const Id dec2 = tape.relu(conv(tape, patch_dec2_, up2));
    return tape.sigmoid(conv(tape, patch_out_, dec2));
  }

  // ---- training plan -------------------------------------------------------

  RoiPlan make_plan(const TrainBatch& batch, const Tensor<T>& obj_val,
                    const Tensor<T>& box_val) const {
    const int n = static_cast<int>(batch.images.size());
    const int fsz = cfg_.feature_size();
    const int a_count = static_cast<int>(cfg_.anchor_sides.size());
    RoiPlan plan;

    for (int ni = 0; ni < n; ++ni) {
      const auto& gts = batch.gts[ni];
      const auto assign = assign_anchors(gts, obj_val, ni);
      for (const int ai : assign.positives) {
        push_anchor_obj(plan.anchor_obj_indices, plan.anchor_obj_targets, ni,
                        ai, T(1), fsz, a_count);
        const BoxDeltas d =
            encode_box(anchors_[ai], gts[assign.matched_gt[ai]].box);
        push_anchor_box(plan.anchor_box_indices, plan.anchor_box_targets, ni,
                        ai, d, fsz, a_count);
      }
      for (const int ai : assign.negatives)
        push_anchor_obj(plan.anchor_obj_indices, plan.anchor_obj_targets, ni,
                        ai, T(0), fsz, a_count);
    }

    for (int ni = 0; ni < n; ++ni) {
      const auto props =
          make_proposals(obj_val, box_val, ni, cfg_.proposals_train);
      const auto& gts = batch.gts[ni];
      struct Cand {
        typename RoiPlan::PlannedRoi roi;
        double gt_iou = 0.0;
      };
      std::vector<Cand> pos, neg;
      for (const auto& p : props) {
        double best = 0.0;
        int best_gt = -1;
        for (std::size_t gi = 0; gi < gts.size(); ++gi) {
          const double v = iou(p.box, gts[gi].box);
          if (v > best) {
            best = v;
            best_gt = static_cast<int>(gi);
          }
        }
        Cand c;
        c.roi.image = ni;
        c.roi.box = p.box;
        c.gt_iou = best;
        if (best >= cfg_.roi_pos_iou) {
          c.roi.gt_index = best_gt;
          c.roi.cls_target = gts[best_gt].class_id;
          pos.push_back(c);
        } else {
          neg.push_back(c);  // props are score-ordered: hard negatives first
        }
      }
      std::stable_sort(pos.begin(), pos.end(), [](const Cand& a, const Cand& b) {
        return a.gt_iou > b.gt_iou;
      });
      const int max_pos = cfg_.proposals_train / 2;
      if (static_cast<int>(pos.size()) > max_pos) pos.resize(max_pos);
      const int want_neg = cfg_.proposals_train - static_cast<int>(pos.size());
      if (static_cast<int>(neg.size()) > want_neg) neg.resize(want_neg);

      int patch_used = 0;
      for (const auto& c : pos) {
        plan.rois.push_back(c.roi);
        if (patch_used < kPatchRoisPerImage) {
          plan.patch_refs.emplace_back(ni, c.roi.gt_index);
          ++patch_used;
        }
      }
      for (const auto& c : neg) plan.rois.push_back(c.roi);
    }
    if (plan.rois.empty())
      throw std::invalid_argument(
          "forward_train: degenerate batch, no RoIs sampled");
    return plan;
  }

  TrainOutputs apply_plan(Tape<T>& tape, const TrainBatch& batch,
                          const RoiPlan& plan, Id feat, Id rpn_obj,
                          Id rpn_box) {
    TrainOutputs out;
    out.plan = plan;
    auto& L = out.loss;

    if (!plan.anchor_obj_indices.empty()) {
      const Id gathered = tape.gather(
          rpn_obj, plan.anchor_obj_indices,
          {static_cast<int>(plan.anchor_obj_indices.size()), 1});
      L.rpn_obj_probs = tape.sigmoid(gathered);
      L.rpn_obj_targets =
          Tensor<T>({static_cast<int>(plan.anchor_obj_targets.size()), 1});
      std::copy(plan.anchor_obj_targets.begin(), plan.anchor_obj_targets.end(),
                L.rpn_obj_targets.v.data());
    }
    if (!plan.anchor_box_indices.empty()) {
      L.rpn_box_deltas = tape.gather(
          rpn_box, plan.anchor_box_indices,
          {static_cast<int>(plan.anchor_box_indices.size()) / 4, 4});
      L.rpn_box_targets =
          Tensor<T>({static_cast<int>(plan.anchor_box_targets.size()) / 4, 4});
      std::copy(plan.anchor_box_targets.begin(), plan.anchor_box_targets.end(),
                L.rpn_box_targets.v.data());
    }

    const auto& rois = plan.rois;
    L.n_sampled = static_cast<int>(rois.size());

    std::vector<typename Tape<T>::Roi> tape_rois;
    for (const auto& r : rois) tape_rois.push_back({r.image, r.box});
    const Id cls_feats =
        tape.roi_align(feat, tape_rois, cfg_.roi_pool, NetConfig::kStride);
    const auto [cls_logits, box_deltas_all] = forward_tower(tape, cls_feats);
    L.cls_logits = cls_logits;
    for (const auto& r : rois) L.cls_targets.push_back(r.cls_target);

    std::vector<std::int64_t> pos_rows;
    for (std::size_t i = 0; i < rois.size(); ++i)
      if (rois[i].gt_index >= 0)
        pos_rows.push_back(static_cast<std::int64_t>(i));
    L.n_pos = static_cast<int>(pos_rows.size());

    if (!pos_rows.empty()) {
      std::vector<std::int64_t> delta_idx;
      Tensor<T> targets({static_cast<int>(pos_rows.size()), 4});
      for (std::size_t k = 0; k < pos_rows.size(); ++k) {
        const auto& r = rois[pos_rows[k]];
        for (int d = 0; d < 4; ++d) delta_idx.push_back(pos_rows[k] * 4 + d);
        const BoxDeltas enc =
            encode_box(r.box, batch.gts[r.image][r.gt_index].box);
        targets.v[k * 4 + 0] = static_cast<T>(enc.tx);
        targets.v[k * 4 + 1] = static_cast<T>(enc.ty);
        targets.v[k * 4 + 2] = static_cast<T>(enc.tw);
        targets.v[k * 4 + 3] = static_cast<T>(enc.th);
      }
      L.box_deltas = tape.gather(box_deltas_all, delta_idx,
                                 {static_cast<int>(pos_rows.size()), 4});
      L.box_targets = std::move(targets);

      const auto& logits = tape.val(cls_logits);
      const int c_dim = logits.shape[1];
      for (const auto row : pos_rows) {
        int best = 0;
        T best_v = logits.v[row * c_dim];
        for (int c = 1; c < c_dim; ++c)
          if (logits.v[row * c_dim + c] > best_v) {
            best_v = logits.v[row * c_dim + c];
            best = c;
          }
        out.pos_pred_class.push_back(best);
        out.pos_gt_class.push_back(rois[row].cls_target);
      }
    }

    if (!plan.patch_refs.empty()) {
      std::vector<typename Tape<T>::Roi> patch_rois;
      std::vector<const Tensor<T>*> patch_targets;
      for (const auto& [image, gt_index] : plan.patch_refs) {
        const auto& gt = batch.gts.at(image).at(gt_index);
        patch_rois.push_back({image, gt.box});
        patch_targets.push_back(&gt.patch_target);
      }
      const Id pfeat =
          tape.roi_align(feat, patch_rois, cfg_.roi_pool, NetConfig::kStride);
      const Id patch = forward_patch_head(tape, pfeat);
      const int pe = cfg_.head_output * cfg_.head_output;
      L.patch_out =
          tape.reshape(patch, {static_cast<int>(patch_rois.size()), pe});
      Tensor<T> tgt({static_cast<int>(patch_rois.size()), pe});
      for (std::size_t i = 0; i < patch_targets.size(); ++i) {
        if (patch_targets[i]->size() != pe)
          throw std::invalid_argument("forward_train: patch target size");
        std::copy(patch_targets[i]->v.data(), patch_targets[i]->v.data() + pe,
                  tgt.v.data() + static_cast<std::int64_t>(i) * pe);
      }
      L.patch_targets = std::move(tgt);
    }
    return out;
  }

  // ---- anchor assignment / proposals --------------------------------------

  struct AnchorAssignment {
    std::vector<int> positives;
    std::vector<int> negatives;
    std::vector<int> matched_gt;  // per anchor
  };

  AnchorAssignment assign_anchors(const std::vector<GtInstance>& gts,
                                  const Tensor<T>& obj_val, int image) const {
    const int a_total = static_cast<int>(anchors_.size());
    const int a_count = static_cast<int>(cfg_.anchor_sides.size());
    const int fsz = cfg_.feature_size();
    AnchorAssignment out;
    out.matched_gt.assign(a_total, -1);
    if (gts.empty()) {
      // negatives only: rank by current objectness (hard negatives)
      out.negatives = rank_anchors_by_score(obj_val, image, a_total, a_count,
                                            fsz, kRpnSamplesPerImage, {});
      return out;
    }

    std::vector<double> best_iou(a_total, 0.0);
    std::vector<int> best_gt(a_total, -1);
    std::vector<int> gt_best_anchor(gts.size(), -1);
    std::vector<double> gt_best_iou(gts.size(), -1.0);
    for (int ai = 0; ai < a_total; ++ai) {
      for (std::size_t gi = 0; gi < gts.size(); ++gi) {
        const double v = iou(anchors_[ai], gts[gi].box);
        if (v > best_iou[ai]) {
          best_iou[ai] = v;
          best_gt[ai] = static_cast<int>(gi);
        }
        if (v > gt_best_iou[gi]) {
          gt_best_iou[gi] = v;
          gt_best_anchor[gi] = ai;
        }
      }
    }
    std::vector<char> is_pos(a_total, 0);
    for (int ai = 0; ai < a_total; ++ai)
      if (best_iou[ai] >= cfg_.rpn_pos_iou) is_pos[ai] = 1;
    for (std::size_t gi = 0; gi < gts.size(); ++gi)
      if (gt_best_anchor[gi] >= 0) {
        is_pos[gt_best_anchor[gi]] = 1;
        if (best_gt[gt_best_anchor[gi]] < 0)
          best_gt[gt_best_anchor[gi]] = static_cast<int>(gi);
      }

    std::vector<int> pos;
    for (int ai = 0; ai < a_total; ++ai)
      if (is_pos[ai]) pos.push_back(ai);
    std::stable_sort(pos.begin(), pos.end(), [&](int a, int b) {
      return best_iou[a] > best_iou[b];
    });
    if (static_cast<int>(pos.size()) > kRpnMaxPositives)
      pos.resize(kRpnMaxPositives);

    std::vector<char> excluded(a_total, 0);
    for (int ai = 0; ai < a_total; ++ai)
      if (is_pos[ai] || best_iou[ai] >= cfg_.rpn_neg_iou) excluded[ai] = 1;
    const int want_neg = kRpnSamplesPerImage - static_cast<int>(pos.size());
    out.negatives = rank_anchors_by_score(obj_val, image, a_total, a_count,
                                          fsz, want_neg, excluded);
    out.positives = std::move(pos);
    for (const int ai : out.positives) out.matched_gt[ai] = best_gt[ai];
    return out;
  }

  std::vector<int> rank_anchors_by_score(const Tensor<T>& obj_val, int image,
                                         int a_total, int a_count, int fsz,
                                         int want,
                                         const std::vector<char>& excluded) const {
    std::vector<int> order;
    order.reserve(a_total);
    for (int ai = 0; ai < a_total; ++ai)
      if (excluded.empty() || !excluded[ai]) order.push_back(ai);
    const auto score = [&](int ai) {
      const int cell = ai / a_count, a = ai % a_count;
      const int r = cell / fsz, c = cell % fsz;
      return obj_val.v[obj_val.idx4(image, a, r, c)];
    };
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return score(a) > score(b); });
    if (static_cast<int>(order.size()) > want) order.resize(std::max(want, 0));
    return order;
  }

  static void push_anchor_obj(std::vector<std::int64_t>& idx,
                              std::vector<T>& tgt, int image, int anchor,
                              T label, int fsz, int a_count) {
    const int cell = anchor / a_count, a = anchor % a_count;
    const int r = cell / fsz, c = cell % fsz;
    idx.push_back(
        ((static_cast<std::int64_t>(image) * a_count + a) * fsz + r) * fsz + c);
    tgt.push_back(label);
  }

  static void push_anchor_box(std::vector<std::int64_t>& idx,
                              std::vector<T>& tgt, int image, int anchor,
                              const BoxDeltas& d, int fsz, int a_count) {
    const int cell = anchor / a_count, a = anchor % a_count;
    const int r = cell / fsz, c = cell % fsz;
    for (int k = 0; k < 4; ++k)
      idx.push_back(((static_cast<std::int64_t>(image) * (4 * a_count) +
                      (4 * a + k)) * fsz + r) * fsz + c);
    tgt.push_back(static_cast<T>(d.tx));
    tgt.push_back(static_cast<T>(d.ty));
    tgt.push_back(static_cast<T>(d.tw));
    tgt.push_back(static_cast<T>(d.th));
  }

  struct Proposal {
    BBox box;
    double score = 0.0;
  };

  /// Decodes, clips, NMS-filters the RPN output for one image (values only).
  std::vector<Proposal> make_proposals(const Tensor<T>& obj_val,
                                       const Tensor<T>& box_val, int image,
                                       int cap) const {
    const int a_count = static_cast<int>(cfg_.anchor_sides.size());
    const int fsz = cfg_.feature_size();
    const int a_total = static_cast<int>(anchors_.size());

    std::vector<Detection> cands;
    cands.reserve(a_total);
    for (int ai = 0; ai < a_total; ++ai) {
      const int cell = ai / a_count, a = ai % a_count;
      const int r = cell / fsz, c = cell % fsz;
      const double logit =
          static_cast<double>(obj_val.v[obj_val.idx4(image, a, r, c)]);
      const BoxDeltas d{
          static_cast<double>(box_val.v[box_val.idx4(image, 4 * a + 0, r, c)]),
          static_cast<double>(box_val.v[box_val.idx4(image, 4 * a + 1, r, c)]),
          static_cast<double>(box_val.v[box_val.idx4(image, 4 * a + 2, r, c)]),
          static_cast<double>(box_val.v[box_val.idx4(image, 4 * a + 3, r, c)])};
      BBox box = clip_box(decode_box(anchors_[ai], d), cfg_.input_size,
                          cfg_.input_size);
      if (box.width() < 2.0 || box.height() < 2.0) continue;
      Detection det;
      det.box = box;
      det.score = 1.0 / (1.0 + std::exp(-logit));
      cands.push_back(std::move(det));
    }
    std::sort(cands.begin(), cands.end(), [](const Detection& a,
                                             const Detection& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.box.x0 != b.box.x0) return a.box.x0 < b.box.x0;
      return a.box.y0 < b.box.y0;
    });
    if (static_cast<int>(cands.size()) > kPreNmsProposals)
      cands.resize(kPreNmsProposals);
    std::vector<Detection> kept = nms(cands, cfg_.nms_iou);
    if (static_cast<int>(kept.size()) > cap) kept.resize(cap);
    std::vector<Proposal> out;
    out.reserve(kept.size());
    for (const auto& k : kept) out.push_back({k.box, k.score});
    return out;
  }

  static constexpr int kTowerWidth = 256;

  NetConfig cfg_;
  Phase phase_;
  std::uint64_t init_seed_;
  std::vector<Param> params_;
  std::map<std::string, int> name_to_index_;
  std::vector<BBox> anchors_;
  std::vector<Id> bound_;

  std::vector<ConvHandle> backbone_;
  ConvHandle rpn_conv_, rpn_obj_, rpn_box_;
  DenseHandle fc1_, fc_cls_, fc_box_;
  ConvHandle patch_pre_, patch_enc_, patch_dec1_, patch_merge_, patch_dec2_,
      patch_out_;
};

}  // namespace sslseg
