#include <doctest.h>

#include <map>

#include "sslseg/distortion.hpp"
#include "testutil.hpp"

using namespace sslseg;

TEST_SUITE("distortion") {

TEST_CASE("plan count K is uniform over {3..7} by chi-square") {
  DistortionConfig cfg;
  Rng rng(2024, 0);
  std::map<int, int> counts;
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    const DistortionPlan plan = sample_plan(rng, cfg, 320, 320);
    ++counts[static_cast<int>(plan.items.size())];
  }
  REQUIRE(counts.size() == 5);
  const double expected = n / 5.0;
  double chi2 = 0.0;
  for (const auto& [k, c] : counts) {
    REQUIRE(k >= 3);
    REQUIRE(k <= 7);
    chi2 += (c - expected) * (c - expected) / expected;
  }
  CHECK(chi2 < 18.467);  // df=4, alpha=0.001
}

TEST_CASE("every planned box side lies in [50,80] and boxes are disjoint") {
  DistortionConfig cfg;
  Rng rng(5, 0);
  for (int i = 0; i < 200; ++i) {
    const DistortionPlan plan = sample_plan(rng, cfg, 320, 320);
    for (std::size_t a = 0; a < plan.items.size(); ++a) {
      const BBox& b = plan.items[a].box;
      REQUIRE(b.width() >= 50);
      REQUIRE(b.width() <= 80);
      REQUIRE(b.height() >= 50);
      REQUIRE(b.height() <= 80);
      REQUIRE(b.valid_in(320, 320));
      for (std::size_t c = a + 1; c < plan.items.size(); ++c)
        REQUIRE(iou(b, plan.items[c].box) == 0.0);
    }
  }
}

TEST_CASE("degenerate config: one full-image box") {
  DistortionConfig cfg;
  cfg.count_range = {1, 1};
  cfg.size_range = {64, 64};
  Rng rng(6, 0);
  const DistortionPlan plan = sample_plan(rng, cfg, 64, 64);
  REQUIRE(plan.items.size() == 1);
  CHECK(plan.items[0].box == BBox{0, 0, 64, 64});
}

TEST_CASE("plan rejects images too small for the minimum count") {
  DistortionConfig cfg;  // needs 3 disjoint 80px boxes
  Rng rng(7, 0);
  CHECK_THROWS_WITH_AS(sample_plan(rng, cfg, 100, 100),
                       doctest::Contains("100x100"), std::invalid_argument);
}

TEST_CASE("blank zeroes the region and nothing else") {
  Rng rng(8, 0);
  const Image img = test::random_image(rng, 60, 60) * 0.5f + 0.25f;
  const BBox box{10, 12, 30, 40};
  Rng apply_rng(8, 1);
  const Image out = apply_distortion(img, box, DistortionType::kBlank, {},
                                     apply_rng);
  for (int r = 0; r < 60; ++r)
    for (int c = 0; c < 60; ++c) {
      const bool inside = r >= 12 && r < 40 && c >= 10 && c < 30;
      REQUIRE(out(r, c) == (inside ? 0.0f : img(r, c)));
    }
}

TEST_CASE("salt_pepper with fraction 0 leaves the image unchanged") {
  Rng rng(9, 0);
  const Image img = test::random_image(rng, 40, 40);
  Rng apply_rng(9, 1);
  const Image out = apply_distortion(img, BBox{5, 5, 30, 30},
                                     DistortionType::kSaltPepper,
                                     {{"fraction", 0.0}}, apply_rng);
  CHECK(test::images_equal(out, img));
}

TEST_CASE("salt_pepper corrupted pixels are exactly 0 or 1") {
  Rng rng(10, 0);
  const Image img = test::random_image(rng, 40, 40) * 0.6f + 0.2f;
  Rng apply_rng(10, 1);
  const Image out = apply_distortion(img, BBox{0, 0, 40, 40},
                                     DistortionType::kSaltPepper,
                                     {{"fraction", 0.2}}, apply_rng);
  int corrupted = 0;
  for (int r = 0; r < 40; ++r)
    for (int c = 0; c < 40; ++c)
      if (out(r, c) != img(r, c)) {
        REQUIRE((out(r, c) == 0.0f || out(r, c) == 1.0f));
        ++corrupted;
      }
  // ~20% of 1600, generous band
  CHECK(corrupted > 200);
  CHECK(corrupted < 450);
}

TEST_CASE("rotate k=2 applied twice restores the region") {
  Rng rng(11, 0);
  const Image img = test::random_image(rng, 50, 50);
  const BBox box{4, 8, 34, 38};  // non-square is fine for k=2
  Rng r1(11, 1), r2(11, 2);
  const std::map<std::string, double> params{{"quarter_turns", 2.0}};
  const Image once =
      apply_distortion(img, box, DistortionType::kRotate, params, r1);
  const Image twice =
      apply_distortion(once, box, DistortionType::kRotate, params, r2);
  CHECK(test::images_equal(twice, img));
}

TEST_CASE("rotate k=1 four times is the identity on a square region") {
  Rng rng(12, 0);
  const Image img = test::random_image(rng, 50, 50);
  const BBox box{6, 10, 26, 30};
  const std::map<std::string, double> params{{"quarter_turns", 1.0}};
  Image cur = img;
  for (int i = 0; i < 4; ++i) {
    Rng r(12, static_cast<std::uint64_t>(i) + 1);
    cur = apply_distortion(cur, box, DistortionType::kRotate, params, r);
    if (i < 3) CHECK_FALSE(test::images_equal(cur, img));
  }
  CHECK(test::images_equal(cur, img));
}

TEST_CASE("rotate k=1 on a non-square box is rejected") {
  const Image img = Image::Constant(40, 40, 0.5f);
  Rng r(13, 0);
  CHECK_THROWS_AS(apply_distortion(img, BBox{0, 0, 20, 30},
                                   DistortionType::kRotate,
                                   {{"quarter_turns", 1.0}}, r),
                  std::invalid_argument);
}

TEST_CASE("mislocate replaces region with a disjoint same-image crop") {
  Rng rng(14, 0);
  const Image img = test::random_image(rng, 120, 120);
  const BBox box{20, 20, 60, 60};
  Rng apply_rng(14, 1);
  std::map<std::string, double> drawn;
  const Image out = apply_distortion(img, box, DistortionType::kMislocate, {},
                                     apply_rng, &drawn);
  REQUIRE(drawn.count("src_x0") == 1);
  REQUIRE(drawn.count("src_y0") == 1);
  const int sx = static_cast<int>(drawn["src_x0"]);
  const int sy = static_cast<int>(drawn["src_y0"]);
  const BBox src{static_cast<double>(sx), static_cast<double>(sy),
                 static_cast<double>(sx + 40), static_cast<double>(sy + 40)};
  CHECK(intersection_area(src, box) == 0.0);
  // region content equals the source crop from the pre-distortion image
  for (int r = 0; r < 40; ++r)
    for (int c = 0; c < 40; ++c)
      REQUIRE(out(20 + r, 20 + c) == img(sy + r, sx + c));
}

TEST_CASE("mislocate falls back to a distinct offset when no disjoint source fits") {
  Rng rng(15, 0);
  const Image img = test::random_image(rng, 50, 50);
  const BBox box{1, 1, 49, 49};  // nearly full image
  Rng apply_rng(15, 1);
  std::map<std::string, double> drawn;
  const Image out = apply_distortion(img, box, DistortionType::kMislocate, {},
                                     apply_rng, &drawn);
  const int sx = static_cast<int>(drawn["src_x0"]);
  const int sy = static_cast<int>(drawn["src_y0"]);
  CHECK((sx != 1 || sy != 1));
  CHECK_FALSE(test::images_equal(out, img));
}

TEST_CASE("mislocate on the full-image box is an error") {
  const Image img = Image::Constant(30, 30, 0.5f);
  Rng r(16, 0);
  CHECK_THROWS_AS(apply_distortion(img, BBox{0, 0, 30, 30},
                                   DistortionType::kMislocate, {}, r),
                  std::invalid_argument);
}

TEST_CASE("speckle keeps the regional mean close to the original") {
  Rng rng(17, 0);
  const Image img = Image::Constant(100, 100, 0.5f);
  const BBox box{10, 10, 90, 90};
  Rng apply_rng(17, 1);
  const double sigma = 0.3;
  const Image out = apply_distortion(img, box, DistortionType::kSpeckle,
                                     {{"sigma", sigma}}, apply_rng);
  const double area = 80.0 * 80.0;
  const double mean_out =
      out.block(10, 10, 80, 80).cast<double>().mean();
  CHECK(std::abs(mean_out - 0.5) < 3.0 * 0.5 * sigma / std::sqrt(area));
}

TEST_CASE("distort_sample: locality, determinism, recoverability") {
  Rng img_rng(18, 0);
  const Image original = test::random_image(img_rng, 320, 320);
  DistortionConfig cfg;
  Rng plan_rng(18, 1);
  const DistortionPlan plan = sample_plan(plan_rng, cfg, 320, 320);

  const AnnotatedSample a = distort_sample(original, plan);
  const AnnotatedSample b = distort_sample(original, plan);
  CHECK(test::images_equal(a.distorted, b.distorted));

  // locality: untouched outside the union of boxes
  MaskImage inside = MaskImage::Zero(320, 320);
  for (const auto& rec : a.records) {
    const auto [x0, y0, x1, y1] = rec.box.iround();
    inside.block(y0, x0, y1 - y0, x1 - x0).setConstant(1);
  }
  for (int r = 0; r < 320; ++r)
    for (int c = 0; c < 320; ++c)
      if (!inside(r, c)) REQUIRE(a.distorted(r, c) == original(r, c));

  // recoverability oracle: pasting the recorded patches undoes everything
  Image restored = a.distorted;
  for (const auto& rec : a.records) paste(restored, rec.original_patch, rec.box);
  CHECK(test::images_equal(restored, original));
}

namespace {

// Exact mean of clamp(v*(1+n), 0, 1), n ~ N(0, sigma^2). The naive
// "mean is preserved" bound ignores that clamping skews bright pixels.
double clamped_speckle_mean(double v, double sigma) {
  const double s = v * sigma;
  if (s == 0.0) return std::clamp(v, 0.0, 1.0);
  const auto phi = [](double x) {
    return std::exp(-0.5 * x * x) / 2.506628274631000502;
  };
  const auto cdf = [](double x) {
    return 0.5 * (1.0 + std::erf(x / 1.4142135623730951));
  };
  const double a = (0.0 - v) / s, b = (1.0 - v) / s;
  return (1.0 - cdf(b)) + v * (cdf(b) - cdf(a)) - s * (phi(b) - phi(a));
}

}  // namespace

TEST_CASE("blank record mean and record params are sound") {
  Rng img_rng(19, 0);
  const Image original = test::random_image(img_rng, 320, 320);
  DistortionConfig cfg;
  Rng plan_rng(19, 1);
  for (int trial = 0; trial < 10; ++trial) {
    const DistortionPlan plan = sample_plan(plan_rng, cfg, 320, 320);
    const AnnotatedSample s = distort_sample(original, plan);
    for (const auto& rec : s.records) {
      const auto [x0, y0, x1, y1] = rec.box.iround();
      const auto region =
          s.distorted.block(y0, x0, y1 - y0, x1 - x0).cast<double>();
      if (rec.dtype == DistortionType::kBlank) {
        CHECK(region.mean() == 0.0);
      } else if (rec.dtype == DistortionType::kSpeckle) {
        const double sigma = rec.params.at("sigma");
        double expected = 0.0;
        for (Eigen::Index r = 0; r < rec.original_patch.rows(); ++r)
          for (Eigen::Index c = 0; c < rec.original_patch.cols(); ++c)
            expected += clamped_speckle_mean(rec.original_patch(r, c), sigma);
        expected /= rec.box.area();
        CHECK(std::abs(region.mean() - expected) <=
              3.0 * sigma / std::sqrt(rec.box.area()));
      } else if (rec.dtype == DistortionType::kMislocate) {
        CHECK(rec.params.count("src_x0") == 1);
      }
    }
  }
}

TEST_CASE("config validation catches bad ranges") {
  DistortionConfig cfg;
  cfg.count_range = {8, 2};
  CHECK_THROWS_WITH_AS(cfg.validate(), doctest::Contains("count_range"),
                       std::invalid_argument);
  cfg = DistortionConfig{};
  cfg.sp_fraction = {0.5, 1.5};
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
  cfg = DistortionConfig{};
  cfg.rotate_quarter_turns = {4};
  CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

}  // TEST_SUITE
