#pragma once

#include <nlohmann/json_fwd.hpp>

#include "sslseg/autodiff.hpp"
#include "sslseg/net_config.hpp"

namespace sslseg {

/// Per-step loss breakdown. l_total is always the plain sum of the five
/// component terms (unit weights); l_patch is L_Restored in the pretext
/// phase and the mask BCE downstream.
struct LossReport {
  double l_total = 0.0;
  double l_rpn_obj = 0.0;
  double l_rpn_box = 0.0;
  double l_cls = 0.0;
  double l_bbox = 0.0;
  double l_patch = 0.0;
  int n_pos = 0;
  int n_sampled = 0;
  bool no_positives = false;

  nlohmann::json to_json() const;
};

/// Everything forward_train hands to the loss assembly: tape ids for the
/// differentiable pieces plus constant targets. Ids are -1 when a term has
/// no inputs this step (its loss contributes 0).
template <typename T>
struct LossInputs {
  typename Tape<T>::Id rpn_obj_probs = -1;  // {A_s,1} sampled anchor scores
  Tensor<T> rpn_obj_targets;                // {A_s,1} 0/1
  typename Tape<T>::Id rpn_box_deltas = -1; // {A_pos,4}
  Tensor<T> rpn_box_targets;
  typename Tape<T>::Id cls_logits = -1;     // {R, classes+1}
  std::vector<int> cls_targets;             // R, 0 = background
  typename Tape<T>::Id box_deltas = -1;     // {R_pos,4}
  Tensor<T> box_targets;
  typename Tape<T>::Id patch_out = -1;      // {P, head^2} in [0,1]
  Tensor<T> patch_targets;
  int n_pos = 0;
  int n_sampled = 0;
};

template <typename T>
struct LossBundle {
  typename Tape<T>::Id total = -1;
  LossReport report;
};

/// L = L_rpn_obj + L_rpn_box + L_cls + L_bbox + L_patch, the patch term
/// chosen by phase. Empty terms contribute exact zeros so batches without
/// positives stay finite.
template <typename T>
LossBundle<T> total_loss(Tape<T>& tape, const LossInputs<T>& in, Phase phase) {
  std::vector<typename Tape<T>::Id> parts;
  LossBundle<T> out;
  out.report.n_pos = in.n_pos;
  out.report.n_sampled = in.n_sampled;
  out.report.no_positives = in.n_pos == 0;

  const auto zero = [&] { return tape.leaf(Tensor<T>::scalar(T(0)), false); };
  const auto push = [&](typename Tape<T>::Id id, double& slot) {
    slot = static_cast<double>(tape.scalar_value(id));
    parts.push_back(id);
  };

  push(in.rpn_obj_probs >= 0 ? tape.bce(in.rpn_obj_probs, in.rpn_obj_targets)
                             : zero(),
       out.report.l_rpn_obj);
  push(in.rpn_box_deltas >= 0
           ? tape.smooth_l1(in.rpn_box_deltas, in.rpn_box_targets)
           : zero(),
       out.report.l_rpn_box);
  push(in.cls_logits >= 0
           ? tape.softmax_cross_entropy(in.cls_logits, in.cls_targets)
           : zero(),
       out.report.l_cls);
  push(in.box_deltas >= 0 ? tape.smooth_l1(in.box_deltas, in.box_targets)
                          : zero(),
       out.report.l_bbox);
  typename Tape<T>::Id patch;
  if (in.patch_out < 0) {
    patch = zero();
  } else if (phase == Phase::kPretext) {
    patch = tape.restored_loss(in.patch_out, in.patch_targets);
  } else {
    patch = tape.bce(in.patch_out, in.patch_targets);
  }
  push(patch, out.report.l_patch);

  out.total = tape.add_scalars(parts);
  out.report.l_total = static_cast<double>(tape.scalar_value(out.total));
  return out;
}

// ---- value-only wrappers (single implementation shared with the tape) ----

template <typename T>
T l_restored_value(const Tensor<T>& pred, const Tensor<T>& target) {
  Tape<T> tape(false);
  return tape.scalar_value(
      tape.restored_loss(tape.leaf(pred, false), target));
}

template <typename T>
T l_cls_value(const Tensor<T>& logits, std::vector<int> targets) {
  Tape<T> tape(false);
  return tape.scalar_value(tape.softmax_cross_entropy(
      tape.leaf(logits, false), std::move(targets)));
}

template <typename T>
T l_bbox_value(const Tensor<T>& pred, const Tensor<T>& target) {
  Tape<T> tape(false);
  return tape.scalar_value(tape.smooth_l1(tape.leaf(pred, false), target));
}

template <typename T>
T l_mask_value(const Tensor<T>& probs, const Tensor<T>& target) {
  Tape<T> tape(false);
  return tape.scalar_value(tape.bce(tape.leaf(probs, false), target));
}

}  // namespace sslseg
