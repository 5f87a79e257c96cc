#pragma once

#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "sslseg/detection.hpp"
#include "sslseg/image.hpp"
#include "sslseg/types.hpp"

namespace sslseg {

/// Structural similarity, Gaussian 11x11 window (sigma 1.5), K1=0.01,
/// K2=0.03, dynamic range 1.0, averaged over all valid window positions.
double ssim(const Image& a, const Image& b);

/// Peak signal-to-noise ratio in dB against peak 1.0. An MSE below 1e-10 is
/// treated as an exact match and capped at 100 dB (flag set) so rows stay
/// finite and totally ordered.
double psnr(const Image& a, const Image& b, bool* exact_match = nullptr);

/// Cosine similarity of the flattened images, epsilon-guarded (1e-8).
/// Two all-zero images are defined as identical: 1.0 with the flag set.
double cosine_sim(const Image& a, const Image& b, bool* degenerate = nullptr);

/// I_org / I_dist / I_ssl triple evaluated in the SSL report.
struct SslEvalTriple {
  Image original;   // I_org
  Image distorted;  // I_dist
  Image recovered;  // I_ssl
};

struct SslEvalRow {
  double ssim_dist = 0, ssim_ssl = 0, ssim_delta = 0;
  double psnr_dist = 0, psnr_ssl = 0, psnr_delta = 0;
  double cs_dist = 0, cs_ssl = 0, cs_delta = 0;
};

/// Assembles a row from the six similarity values; each delta is the exact
/// difference ssl - dist.
SslEvalRow make_ssl_row(double ssim_dist, double ssim_ssl, double psnr_dist,
                        double psnr_ssl, double cs_dist, double cs_ssl);

SslEvalRow eval_ssl(const SslEvalTriple& triple);

nlohmann::json ssl_row_to_json(const SslEvalRow& row);

/// Greedy detection matching: predictions in descending score order claim
/// the unmatched same-class ground truth with the highest IoU >= threshold.
/// Ties break by (score, x0, y0, input order).
struct MatchResult {
  int tp = 0, fp = 0, fn = 0;
  std::vector<std::pair<int, int>> matching;  // (pred index, gt index)
};

MatchResult match_detections(const std::vector<Detection>& preds,
                             const std::vector<std::pair<int, BBox>>& gts,
                             double iou_thresh = 0.5);

struct PrecisionRecall {
  double precision = 0.0;
  double recall = 0.0;
  bool precision_degenerate = false;  // 0/0 reported as 0
  bool recall_degenerate = false;
};

PrecisionRecall detection_prf(int tp, int fp, int fn);

struct PixelCounts {
  std::int64_t tp = 0, fp = 0, fn = 0;
};

PixelCounts dice_counts(const MaskImage& pred, const MaskImage& gt);

/// Dice = 2TP / (2TP + FP + FN) over pixels. Two empty masks agree
/// perfectly and score 1 (flag reported when requested).
double dice_pixel(const MaskImage& pred, const MaskImage& gt,
                  bool* degenerate = nullptr);

struct SegEvalRow {
  int tp = 0, fp = 0, fn = 0;
  double precision = 0.0, recall = 0.0;
  double dice_macro = 0.0;  // mean of per-image dice
  double dice_micro = 0.0;  // pooled pixel counts
};

nlohmann::json seg_row_to_json(const SegEvalRow& row);

}  // namespace sslseg
