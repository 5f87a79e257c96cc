#include <doctest.h>

#include <cmath>

#include "sslseg/metrics.hpp"
#include "testutil.hpp"

using namespace sslseg;

namespace {

// Naive sliding-window SSIM, the independent reference for the fast path.
double ssim_reference(const Image& a, const Image& b) {
  const int win = 11, r = win / 2;
  const double sigma = 1.5, c1 = 1e-4, c2 = 9e-4;
  double k[11][11], ksum = 0.0;
  for (int i = 0; i < win; ++i)
    for (int j = 0; j < win; ++j) {
      k[i][j] = std::exp(-0.5 * ((i - r) * (i - r) + (j - r) * (j - r)) /
                         (sigma * sigma));
      ksum += k[i][j];
    }
  for (int i = 0; i < win; ++i)
    for (int j = 0; j < win; ++j) k[i][j] /= ksum;

  double total = 0.0;
  int count = 0;
  for (int y = 0; y + win <= a.rows(); ++y)
    for (int x = 0; x + win <= a.cols(); ++x) {
      double mx = 0, my = 0;
      for (int i = 0; i < win; ++i)
        for (int j = 0; j < win; ++j) {
          mx += k[i][j] * a(y + i, x + j);
          my += k[i][j] * b(y + i, x + j);
        }
      double vx = 0, vy = 0, cov = 0;
      for (int i = 0; i < win; ++i)
        for (int j = 0; j < win; ++j) {
          const double dx = a(y + i, x + j) - mx;
          const double dy = b(y + i, x + j) - my;
          vx += k[i][j] * dx * dx;
          vy += k[i][j] * dy * dy;
          cov += k[i][j] * dx * dy;
        }
      total += ((2 * mx * my + c1) * (2 * cov + c2)) /
               ((mx * mx + my * my + c1) * (vx + vy + c2));
      ++count;
    }
  return total / count;
}

// Pixel-count IoU for integral boxes.
double iou_bruteforce(const BBox& a, const BBox& b) {
  const int xmax = static_cast<int>(std::max(a.x1, b.x1));
  const int ymax = static_cast<int>(std::max(a.y1, b.y1));
  std::int64_t inter = 0, uni = 0;
  for (int y = 0; y < ymax; ++y)
    for (int x = 0; x < xmax; ++x) {
      const bool in_a = x >= a.x0 && x < a.x1 && y >= a.y0 && y < a.y1;
      const bool in_b = x >= b.x0 && x < b.x1 && y >= b.y0 && y < b.y1;
      if (in_a && in_b) ++inter;
      if (in_a || in_b) ++uni;
    }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / uni;
}

Detection det(const BBox& box, int cls, double score) {
  Detection d;
  d.box = box;
  d.class_id = cls;
  d.score = score;
  return d;
}

}  // namespace

TEST_SUITE("metrics") {

TEST_CASE("ssim of an image with itself is 1") {
  Rng rng(20, 0);
  const Image img = test::random_image(rng, 32, 32);
  CHECK(ssim(img, img) == doctest::Approx(1.0).epsilon(1e-9));
}

TEST_CASE("ssim of uniform 0 vs uniform 1 is C1/(1+C1)") {
  const Image zero = Image::Zero(16, 16);
  const Image one = Image::Constant(16, 16, 1.0f);
  CHECK(ssim(zero, one) == doctest::Approx(1e-4 / 1.0001).epsilon(1e-9));
}

TEST_CASE("ssim matches the naive reference on random pairs") {
  Rng rng(21, 0);
  for (int trial = 0; trial < 50; ++trial) {
    const Image a = test::random_image(rng, 16, 16);
    Image b = test::random_image(rng, 16, 16);
    if (trial % 3 == 0) b = (a + 0.1f * b).min(1.0f);  // correlated pair
    CHECK(ssim(a, b) == doctest::Approx(ssim_reference(a, b)).epsilon(1e-6));
    CHECK(ssim(a, b) == doctest::Approx(ssim(b, a)).epsilon(1e-12));
  }
}

TEST_CASE("ssim rejects images below the window size") {
  const Image small = Image::Constant(10, 16, 0.5f);
  CHECK_THROWS_AS(ssim(small, small), std::invalid_argument);
}

TEST_CASE("psnr: identity capped at 100 dB with flag") {
  Rng rng(22, 0);
  const Image img = test::random_image(rng, 20, 20);
  bool exact = false;
  CHECK(psnr(img, img, &exact) == 100.0);
  CHECK(exact);
}

TEST_CASE("psnr: MSE 0.01 gives exactly 20 dB") {
  const Image a = Image::Zero(10, 10);
  const Image b = Image::Constant(10, 10, 0.1f);
  bool exact = true;
  CHECK(psnr(a, b, &exact) == doctest::Approx(20.0).epsilon(1e-6));
  CHECK_FALSE(exact);
}

TEST_CASE("psnr is non-increasing as noise grows") {
  Rng rng(23, 0);
  const Image base = Image::Constant(24, 24, 0.5f);
  double prev = std::numeric_limits<double>::infinity();
  for (const double level : {0.01, 0.03, 0.08, 0.15, 0.3}) {
    Image noisy = base;
    Rng nrng(23, static_cast<std::uint64_t>(level * 1000));
    for (Eigen::Index r = 0; r < noisy.rows(); ++r)
      for (Eigen::Index c = 0; c < noisy.cols(); ++c)
        noisy(r, c) = static_cast<float>(
            std::clamp(noisy(r, c) + nrng.normal(0.0, level), 0.0, 1.0));
    const double v = psnr(base, noisy);
    CHECK(v <= prev);
    prev = v;
  }
}

TEST_CASE("psnr matches a naive double-loop MSE on random pairs") {
  Rng rng(24, 0);
  for (int trial = 0; trial < 50; ++trial) {
    const Image a = test::random_image(rng, 16, 16);
    const Image b = test::random_image(rng, 16, 16);
    double mse = 0.0;
    for (int r = 0; r < 16; ++r)
      for (int c = 0; c < 16; ++c) {
        const double d = static_cast<double>(a(r, c)) - b(r, c);
        mse += d * d;
      }
    mse /= 256.0;
    CHECK(psnr(a, b) ==
          doctest::Approx(10.0 * std::log10(1.0 / mse)).epsilon(1e-6));
  }
}

TEST_CASE("cosine similarity: identity, scale invariance, orthogonality") {
  Rng rng(25, 0);
  const Image img = test::random_image(rng, 12, 12);
  CHECK(cosine_sim(img, img) == doctest::Approx(1.0).epsilon(1e-12));
  const Image half = img * 0.5f;
  CHECK(cosine_sim(img, half) == doctest::Approx(1.0).epsilon(1e-6));

  Image left = Image::Zero(8, 8), right = Image::Zero(8, 8);
  left.block(0, 0, 8, 4).setConstant(0.7f);
  right.block(0, 4, 8, 4).setConstant(0.9f);
  CHECK(cosine_sim(left, right) == 0.0);

  bool degenerate = false;
  CHECK(cosine_sim(Image::Zero(4, 4), Image::Zero(4, 4), &degenerate) == 1.0);
  CHECK(degenerate);
}

TEST_CASE("cosine matches a naive flattened-dot reference") {
  Rng rng(26, 0);
  for (int trial = 0; trial < 50; ++trial) {
    const Image a = test::random_image(rng, 16, 16);
    const Image b = test::random_image(rng, 16, 16);
    double dot = 0, na = 0, nb = 0;
    for (int r = 0; r < 16; ++r)
      for (int c = 0; c < 16; ++c) {
        dot += static_cast<double>(a(r, c)) * b(r, c);
        na += static_cast<double>(a(r, c)) * a(r, c);
        nb += static_cast<double>(b(r, c)) * b(r, c);
      }
    CHECK(cosine_sim(a, b) ==
          doctest::Approx(dot / (std::sqrt(na) * std::sqrt(nb))).epsilon(1e-6));
  }
}

TEST_CASE("iou matches pixel-count brute force on random integral boxes") {
  Rng rng(27, 0);
  CHECK(iou(BBox{0, 0, 10, 10}, BBox{5, 5, 15, 15}) ==
        doctest::Approx(25.0 / 175.0).epsilon(1e-12));
  for (int trial = 0; trial < 100; ++trial) {
    const auto draw = [&] {
      const int x0 = static_cast<int>(rng.uniform_int(0, 20));
      const int y0 = static_cast<int>(rng.uniform_int(0, 20));
      const int x1 = static_cast<int>(rng.uniform_int(x0 + 1, 28));
      const int y1 = static_cast<int>(rng.uniform_int(y0 + 1, 28));
      return BBox{static_cast<double>(x0), static_cast<double>(y0),
                  static_cast<double>(x1), static_cast<double>(y1)};
    };
    const BBox a = draw(), b = draw();
    CHECK(iou(a, b) == doctest::Approx(iou_bruteforce(a, b)).epsilon(1e-9));
    CHECK(iou(a, b) == iou(b, a));
    CHECK(iou(a, a) == 1.0);
  }
}

TEST_CASE("ssl row deltas are exact differences, including the 0.05 case") {
  const SslEvalRow row = make_ssl_row(0.79, 0.84, 19.50, 27.13, 0.79, 0.81);
  CHECK(row.ssim_delta == 0.84 - 0.79);
  CHECK(row.ssim_delta == doctest::Approx(0.05).epsilon(1e-9));
  CHECK(row.psnr_delta == doctest::Approx(7.63).epsilon(1e-9));
  CHECK(row.cs_delta == doctest::Approx(0.02).epsilon(1e-9));
}

TEST_CASE("eval_ssl: perfect recovery and no-op recovery") {
  Rng rng(28, 0);
  const Image org = test::random_image(rng, 32, 32);
  Image dist = org;
  dist.block(4, 4, 10, 10).setZero();

  const SslEvalRow perfect = eval_ssl({org, dist, org});
  CHECK(perfect.ssim_ssl == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(perfect.psnr_ssl == 100.0);
  CHECK(perfect.cs_ssl == doctest::Approx(1.0).epsilon(1e-12));
  CHECK(perfect.ssim_delta > 0.0);

  const SslEvalRow noop = eval_ssl({org, dist, dist});
  CHECK(noop.ssim_delta == 0.0);
  CHECK(noop.psnr_delta == 0.0);
  CHECK(noop.cs_delta == 0.0);
}

TEST_CASE("match_detections handles empty and exact predictions") {
  const std::vector<std::pair<int, BBox>> gts = {{1, BBox{0, 0, 10, 10}},
                                                 {1, BBox{20, 20, 30, 30}}};
  const MatchResult none = match_detections({}, gts);
  CHECK(none.tp == 0);
  CHECK(none.fp == 0);
  CHECK(none.fn == 2);

  const MatchResult exact = match_detections(
      {det(gts[0].second, 1, 0.9), det(gts[1].second, 1, 0.8)}, gts);
  CHECK(exact.tp == 2);
  CHECK(exact.fp == 0);
  CHECK(exact.fn == 0);
}

TEST_CASE("one prediction overlapping two GTs takes the higher IoU") {
  // pred (0,0,20,10). gt A (0,0,20,12): inter 200, union 240 -> 5/6.
  // gt B (0,2,20,14): inter 160, union 280 -> 4/7. A wins, B is FN.
  const std::vector<std::pair<int, BBox>> gts = {{1, BBox{0, 2, 20, 14}},
                                                 {1, BBox{0, 0, 20, 12}}};
  const MatchResult res =
      match_detections({det(BBox{0, 0, 20, 10}, 1, 0.7)}, gts, 0.5);
  REQUIRE(res.tp == 1);
  CHECK(res.fn == 1);
  REQUIRE(res.matching.size() == 1);
  CHECK(res.matching[0].second == 1);
}

TEST_CASE("match_detections ignores wrong-class overlaps") {
  const std::vector<std::pair<int, BBox>> gts = {{2, BBox{0, 0, 10, 10}}};
  const MatchResult res =
      match_detections({det(BBox{0, 0, 10, 10}, 1, 0.9)}, gts);
  CHECK(res.tp == 0);
  CHECK(res.fp == 1);
  CHECK(res.fn == 1);
}

TEST_CASE("equal-score predictions break ties by box order deterministically") {
  const std::vector<std::pair<int, BBox>> gts = {{1, BBox{0, 0, 10, 10}}};
  const auto run = [&](const std::vector<Detection>& preds) {
    return match_detections(preds, gts).matching;
  };
  const Detection a = det(BBox{0, 0, 10, 10}, 1, 0.5);
  const Detection b = det(BBox{2, 0, 12, 10}, 1, 0.5);
  const auto m1 = run({a, b});
  const auto m2 = run({b, a});
  REQUIRE(m1.size() == 1);
  REQUIRE(m2.size() == 1);
  // same winner regardless of input order: x0 tie-break picks `a`
  CHECK(m1[0].first == 0);
  CHECK(m2[0].first == 1);
}

TEST_CASE("detection_prf evaluates the count formulas") {
  const PrecisionRecall a = detection_prf(2, 1, 1);
  CHECK(a.precision == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
  CHECK(a.recall == doctest::Approx(2.0 / 3.0).epsilon(1e-12));

  const PrecisionRecall b = detection_prf(0, 0, 5);
  CHECK(b.precision == 0.0);
  CHECK(b.precision_degenerate);
  CHECK(b.recall == 0.0);

  const PrecisionRecall c = detection_prf(5, 0, 0);
  CHECK(c.precision == 1.0);
  CHECK(c.recall == 1.0);

  CHECK_THROWS_AS(detection_prf(-1, 0, 0), std::invalid_argument);
}

TEST_CASE("dice: identity, disjoint, worked example, brute force") {
  MaskImage a = MaskImage::Zero(32, 32), b = MaskImage::Zero(32, 32);
  a.block(2, 2, 8, 8).setConstant(1);
  CHECK(dice_pixel(a, a) == 1.0);
  b.block(20, 20, 8, 8).setConstant(1);
  CHECK(dice_pixel(a, b) == 0.0);

  // TP=50, FP=10, FN=10 -> 100/120
  MaskImage gt = MaskImage::Zero(32, 32), pred = MaskImage::Zero(32, 32);
  gt.block(0, 0, 6, 10).setConstant(1);   // 60 gt pixels
  pred.block(1, 0, 6, 10).setConstant(1); // 60 pred, 50 overlap
  CHECK(dice_pixel(pred, gt) == doctest::Approx(100.0 / 120.0).epsilon(1e-12));

  Rng rng(29, 0);
  for (int trial = 0; trial < 20; ++trial) {
    MaskImage p(32, 32), g(32, 32);
    for (int r = 0; r < 32; ++r)
      for (int c = 0; c < 32; ++c) {
        p(r, c) = rng.bernoulli(0.4) ? 1 : 0;
        g(r, c) = rng.bernoulli(0.4) ? 1 : 0;
      }
    std::int64_t tp = 0, fp = 0, fn = 0;
    for (int r = 0; r < 32; ++r)
      for (int c = 0; c < 32; ++c) {
        if (p(r, c) && g(r, c)) ++tp;
        else if (p(r, c)) ++fp;
        else if (g(r, c)) ++fn;
      }
    CHECK(dice_pixel(p, g) ==
          doctest::Approx(2.0 * tp / (2.0 * tp + fp + fn)).epsilon(1e-12));
  }

  bool degenerate = false;
  CHECK(dice_pixel(MaskImage::Zero(4, 4), MaskImage::Zero(4, 4), &degenerate) ==
        1.0);
  CHECK(degenerate);

  MaskImage bad = MaskImage::Zero(4, 4);
  bad(1, 1) = 7;
  CHECK_THROWS_AS(dice_pixel(bad, MaskImage::Zero(4, 4)),
                  std::invalid_argument);
}

}  // TEST_SUITE
