#include "sslseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <nlohmann/json.hpp>

namespace sslseg {

namespace {

using MatD = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

constexpr int kSsimWindow = 11;
constexpr double kSsimSigma = 1.5;
constexpr double kC1 = 0.01 * 0.01;  // (K1*L)^2, L = 1
constexpr double kC2 = 0.03 * 0.03;

std::vector<double> ssim_window() {
  std::vector<double> k(kSsimWindow);
  double sum = 0.0;
  const int r = kSsimWindow / 2;
  for (int i = -r; i <= r; ++i) {
    k[i + r] = std::exp(-0.5 * i * i / (kSsimSigma * kSsimSigma));
    sum += k[i + r];
  }
  for (double& v : k) v /= sum;
  return k;
}

/// Separable valid-mode filtering with the SSIM window.
MatD filter_valid(const MatD& img, const std::vector<double>& k) {
  const Eigen::Index r = static_cast<Eigen::Index>(k.size());
  MatD h(img.rows(), img.cols() - r + 1);
  for (Eigen::Index i = 0; i < h.rows(); ++i)
    for (Eigen::Index j = 0; j < h.cols(); ++j) {
      double acc = 0.0;
      for (Eigen::Index t = 0; t < r; ++t) acc += k[t] * img(i, j + t);
      h(i, j) = acc;
    }
  MatD out(img.rows() - r + 1, h.cols());
  for (Eigen::Index i = 0; i < out.rows(); ++i)
    for (Eigen::Index j = 0; j < out.cols(); ++j) {
      double acc = 0.0;
      for (Eigen::Index t = 0; t < r; ++t) acc += k[t] * h(i + t, j);
      out(i, j) = acc;
    }
  return out;
}

void check_same_dims(const Image& a, const Image& b, const char* who) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw std::invalid_argument(std::string(who) + ": image dims differ");
}

void check_binary(const MaskImage& m, const char* who) {
  if (!((m == 0) || (m == 1)).all())
    throw std::invalid_argument(std::string(who) + ": mask is not binary");
}

}  // namespace

double ssim(const Image& a, const Image& b) {
  check_same_dims(a, b, "ssim");
  if (a.rows() < kSsimWindow || a.cols() < kSsimWindow)
    throw std::invalid_argument("ssim: images smaller than the 11x11 window");
  const MatD x = a.cast<double>();
  const MatD y = b.cast<double>();
  static const std::vector<double> k = ssim_window();

  const MatD mu_x = filter_valid(x, k);
  const MatD mu_y = filter_valid(y, k);
  const MatD sxx = filter_valid(x * x, k) - mu_x * mu_x;
  const MatD syy = filter_valid(y * y, k) - mu_y * mu_y;
  const MatD sxy = filter_valid(x * y, k) - mu_x * mu_y;

  const MatD num = (2.0 * mu_x * mu_y + kC1) * (2.0 * sxy + kC2);
  const MatD den =
      (mu_x * mu_x + mu_y * mu_y + kC1) * (sxx + syy + kC2);
  return (num / den).mean();
}

double psnr(const Image& a, const Image& b, bool* exact_match) {
  check_same_dims(a, b, "psnr");
  const double mse = (a.cast<double>() - b.cast<double>()).square().mean();
  if (exact_match) *exact_match = mse < 1e-10;
  if (mse < 1e-10) return 100.0;
  return 10.0 * std::log10(1.0 / mse);
}

double cosine_sim(const Image& a, const Image& b, bool* degenerate) {
  check_same_dims(a, b, "cosine_sim");
  constexpr double eps = 1e-8;
  const MatD x = a.cast<double>();
  const MatD y = b.cast<double>();
  const double dot = (x * y).sum();
  const double na = std::sqrt((x * x).sum());
  const double nb = std::sqrt((y * y).sum());
  if (degenerate) *degenerate = na == 0.0 && nb == 0.0;
  if (na == 0.0 && nb == 0.0) return 1.0;
  return dot / (std::max(na, eps) * std::max(nb, eps));
}

SslEvalRow make_ssl_row(double ssim_dist, double ssim_ssl, double psnr_dist,
                        double psnr_ssl, double cs_dist, double cs_ssl) {
  SslEvalRow row;
  row.ssim_dist = ssim_dist;
  row.ssim_ssl = ssim_ssl;
  row.ssim_delta = ssim_ssl - ssim_dist;
  row.psnr_dist = psnr_dist;
  row.psnr_ssl = psnr_ssl;
  row.psnr_delta = psnr_ssl - psnr_dist;
  row.cs_dist = cs_dist;
  row.cs_ssl = cs_ssl;
  row.cs_delta = cs_ssl - cs_dist;
  return row;
}

SslEvalRow eval_ssl(const SslEvalTriple& triple) {
  check_same_dims(triple.original, triple.distorted, "eval_ssl");
  check_same_dims(triple.original, triple.recovered, "eval_ssl");
  return make_ssl_row(ssim(triple.original, triple.distorted),
                      ssim(triple.original, triple.recovered),
                      psnr(triple.original, triple.distorted),
                      psnr(triple.original, triple.recovered),
                      cosine_sim(triple.original, triple.distorted),
                      cosine_sim(triple.original, triple.recovered));
}

nlohmann::json ssl_row_to_json(const SslEvalRow& r) {
  return nlohmann::json{
      {"ssim", {{"dist", r.ssim_dist}, {"ssl", r.ssim_ssl}, {"delta", r.ssim_delta}}},
      {"psnr", {{"dist", r.psnr_dist}, {"ssl", r.psnr_ssl}, {"delta", r.psnr_delta}}},
      {"cs", {{"dist", r.cs_dist}, {"ssl", r.cs_ssl}, {"delta", r.cs_delta}}}};
}

MatchResult match_detections(const std::vector<Detection>& preds,
                             const std::vector<std::pair<int, BBox>>& gts,
                             double iou_thresh) {
  for (const auto& p : preds)
    if (!std::isfinite(p.score))
      throw std::invalid_argument("match_detections: non-finite score");

  std::vector<int> order(preds.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](int i, int j) {
    const auto& a = preds[i];
    const auto& b = preds[j];
    if (a.score != b.score) return a.score > b.score;
    if (a.box.x0 != b.box.x0) return a.box.x0 < b.box.x0;
    if (a.box.y0 != b.box.y0) return a.box.y0 < b.box.y0;
    return i < j;
  });

  MatchResult res;
  std::vector<bool> gt_used(gts.size(), false);
  for (const int pi : order) {
    int best_gt = -1;
    double best_iou = iou_thresh;
    for (std::size_t gi = 0; gi < gts.size(); ++gi) {
      if (gt_used[gi] || gts[gi].first != preds[pi].class_id) continue;
      const double v = iou(preds[pi].box, gts[gi].second);
      if (v > best_iou || (v == best_iou && best_gt == -1 && v >= iou_thresh)) {
        best_iou = v;
        best_gt = static_cast<int>(gi);
      }
    }
    if (best_gt >= 0) {
      gt_used[best_gt] = true;
      ++res.tp;
      res.matching.emplace_back(pi, best_gt);
    } else {
      ++res.fp;
    }
  }
  res.fn = static_cast<int>(gts.size()) - res.tp;
  return res;
}

PrecisionRecall detection_prf(int tp, int fp, int fn) {
  if (tp < 0 || fp < 0 || fn < 0)
    throw std::invalid_argument("detection_prf: negative counts");
  PrecisionRecall out;
  if (tp + fp == 0) {
    out.precision = 0.0;
    out.precision_degenerate = true;
  } else {
    out.precision = static_cast<double>(tp) / (tp + fp);
  }
  if (tp + fn == 0) {
    out.recall = 0.0;
    out.recall_degenerate = true;
  } else {
    out.recall = static_cast<double>(tp) / (tp + fn);
  }
  return out;
}

PixelCounts dice_counts(const MaskImage& pred, const MaskImage& gt) {
  if (pred.rows() != gt.rows() || pred.cols() != gt.cols())
    throw std::invalid_argument("dice: mask dims differ");
  check_binary(pred, "dice");
  check_binary(gt, "dice");
  PixelCounts c;
  for (Eigen::Index r = 0; r < pred.rows(); ++r)
    for (Eigen::Index ccol = 0; ccol < pred.cols(); ++ccol) {
      const bool p = pred(r, ccol) != 0, g = gt(r, ccol) != 0;
      if (p && g) ++c.tp;
      else if (p) ++c.fp;
      else if (g) ++c.fn;
    }
  return c;
}

double dice_pixel(const MaskImage& pred, const MaskImage& gt,
                  bool* degenerate) {
  const PixelCounts c = dice_counts(pred, gt);
  const std::int64_t denom = 2 * c.tp + c.fp + c.fn;
  if (degenerate) *degenerate = denom == 0;
  if (denom == 0) return 1.0;  // both masks empty: perfect agreement
  return 2.0 * static_cast<double>(c.tp) / static_cast<double>(denom);
}

nlohmann::json seg_row_to_json(const SegEvalRow& r) {
  return nlohmann::json{{"tp", r.tp},
                        {"fp", r.fp},
                        {"fn", r.fn},
                        {"precision", r.precision},
                        {"recall", r.recall},
                        {"dice_macro", r.dice_macro},
                        {"dice_micro", r.dice_micro}};
}

}  // namespace sslseg
