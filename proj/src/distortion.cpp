#include "sslseg/distortion.hpp"

#include <algorithm>
#include <sstream>

#include <nlohmann/json.hpp>

#include "sslseg/json_util.hpp"
#include "sslseg/png_io.hpp"

namespace sslseg {

using nlohmann::json;

void DistortionConfig::validate() const {
  if (count_range.first < 1 || count_range.first > count_range.second ||
      count_range.second > 10)
    throw std::invalid_argument("distortion: count_range must be within [1,10]");
  if (size_range.first < 1 || size_range.first > size_range.second)
    throw std::invalid_argument("distortion: size_range invalid");
  if (!(blur_sigma.first > 0.0) || blur_sigma.first > blur_sigma.second)
    throw std::invalid_argument("distortion: blur_sigma range invalid");
  if (!(sp_fraction.first >= 0.0) || sp_fraction.first > sp_fraction.second ||
      sp_fraction.second > 1.0)
    throw std::invalid_argument("distortion: sp_fraction range invalid");
  if (!(speckle_sigma.first > 0.0) ||
      speckle_sigma.first > speckle_sigma.second)
    throw std::invalid_argument("distortion: speckle_sigma range invalid");
  if (rotate_quarter_turns.empty())
    throw std::invalid_argument("distortion: rotate_quarter_turns empty");
  for (const int k : rotate_quarter_turns)
    if (k < 1 || k > 3)
      throw std::invalid_argument(
          "distortion: rotate_quarter_turns must be from {1,2,3}");
}

json DistortionConfig::to_json() const {
  return json{
      {"count_range", {count_range.first, count_range.second}},
      {"size_range", {size_range.first, size_range.second}},
      {"blur_sigma", {blur_sigma.first, blur_sigma.second}},
      {"sp_fraction", {sp_fraction.first, sp_fraction.second}},
      {"speckle_sigma", {speckle_sigma.first, speckle_sigma.second}},
      {"rotate_quarter_turns", rotate_quarter_turns},
      {"overlap_policy",
       overlap_policy == OverlapPolicy::kRejectOverlap ? "reject_overlap"
                                                       : "allow"}};
}

DistortionConfig DistortionConfig::from_json(const json& j) {
  check_json_keys(j,
                  {"count_range", "size_range", "blur_sigma", "sp_fraction",
                   "speckle_sigma", "rotate_quarter_turns", "overlap_policy"},
                  "distortion config");
  DistortionConfig c;
  const auto pair_of = [&](const char* key, auto& dst) {
    if (j.contains(key))
      dst = {j[key].at(0).get<typename std::decay_t<decltype(dst)>::first_type>(),
             j[key].at(1).get<typename std::decay_t<decltype(dst)>::second_type>()};
  };
  pair_of("count_range", c.count_range);
  pair_of("size_range", c.size_range);
  pair_of("blur_sigma", c.blur_sigma);
  pair_of("sp_fraction", c.sp_fraction);
  pair_of("speckle_sigma", c.speckle_sigma);
  if (j.contains("rotate_quarter_turns"))
    c.rotate_quarter_turns = j["rotate_quarter_turns"].get<std::vector<int>>();
  if (j.contains("overlap_policy")) {
    const auto s = j["overlap_policy"].get<std::string>();
    if (s == "reject_overlap")
      c.overlap_policy = OverlapPolicy::kRejectOverlap;
    else if (s == "allow")
      c.overlap_policy = OverlapPolicy::kAllow;
    else
      throw std::invalid_argument("distortion: unknown overlap_policy " + s);
  }
  c.validate();
  return c;
}

namespace {

bool disjoint_from_all(const BBox& b, const std::vector<BBox>& placed) {
  for (const auto& p : placed)
    if (intersection_area(b, p) > 0.0) return false;
  return true;
}

[[noreturn]] void placement_failure(int img_h, int img_w,
                                    const DistortionConfig& cfg) {
  std::ostringstream os;
  os << "sample_plan: could not place disjoint boxes after bounded retries "
     << "(image " << img_w << "x" << img_h << ", count_range ["
     << cfg.count_range.first << "," << cfg.count_range.second
     << "], size_range [" << cfg.size_range.first << ","
     << cfg.size_range.second << "])";
  throw std::runtime_error(os.str());
}

}  // namespace

DistortionPlan sample_plan(Rng& rng, const DistortionConfig& cfg, int img_h,
                           int img_w) {
  cfg.validate();
  const int max_side = cfg.size_range.second;
  const int packable = (img_w / max_side) * (img_h / max_side);
  if (packable < cfg.count_range.first) {
    std::ostringstream os;
    os << "sample_plan: image " << img_w << "x" << img_h << " cannot hold "
       << cfg.count_range.first << " disjoint boxes of side " << max_side;
    throw std::invalid_argument(os.str());
  }

  DistortionPlan plan;
  plan.source_seed = rng.next_u64();
  const int count = static_cast<int>(
      rng.uniform_int(cfg.count_range.first, cfg.count_range.second));
  std::vector<BBox> placed;

  for (int k = 0; k < count; ++k) {
    PlannedDistortion item;
    item.dtype = distortion_from_code(static_cast<int>(rng.uniform_int(1, 6)));

    int bw, bh;
    if (item.dtype == DistortionType::kRotate) {
      // Quarter turns are exact only on square regions.
      bw = bh = static_cast<int>(
          rng.uniform_int(cfg.size_range.first, cfg.size_range.second));
    } else {
      bw = static_cast<int>(
          rng.uniform_int(cfg.size_range.first, cfg.size_range.second));
      bh = static_cast<int>(
          rng.uniform_int(cfg.size_range.first, cfg.size_range.second));
    }
    switch (item.dtype) {
      case DistortionType::kBlurred:
        item.params["sigma"] = rng.uniform(cfg.blur_sigma.first,
                                           cfg.blur_sigma.second);
        break;
      case DistortionType::kSaltPepper:
        item.params["fraction"] = rng.uniform(cfg.sp_fraction.first,
                                              cfg.sp_fraction.second);
        break;
      case DistortionType::kSpeckle:
        item.params["sigma"] = rng.uniform(cfg.speckle_sigma.first,
                                           cfg.speckle_sigma.second);
        break;
      case DistortionType::kRotate: {
        const auto& turns = cfg.rotate_quarter_turns;
        item.params["quarter_turns"] = static_cast<double>(
            turns[rng.uniform_int(0, static_cast<int>(turns.size()) - 1)]);
        break;
      }
      default:
        break;
    }

    bool found = false;
    // Bounded rejection sampling, shrinking the box when crowded.
    while (!found) {
      for (int attempt = 0; attempt < 50; ++attempt) {
        const int x0 = static_cast<int>(rng.uniform_int(0, img_w - bw));
        const int y0 = static_cast<int>(rng.uniform_int(0, img_h - bh));
        BBox b{static_cast<double>(x0), static_cast<double>(y0),
               static_cast<double>(x0 + bw), static_cast<double>(y0 + bh)};
        if (cfg.overlap_policy == OverlapPolicy::kRejectOverlap &&
            !disjoint_from_all(b, placed))
          continue;
        item.box = b;
        found = true;
        break;
      }
      if (found) break;
      if (bw <= cfg.size_range.first && bh <= cfg.size_range.first)
        placement_failure(img_h, img_w, cfg);
      bw = std::max(cfg.size_range.first, (bw * 85) / 100);
      bh = item.dtype == DistortionType::kRotate
               ? bw
               : std::max(cfg.size_range.first, (bh * 85) / 100);
    }
    placed.push_back(item.box);
    plan.items.push_back(std::move(item));
  }
  return plan;
}

namespace {

double required_param(const std::map<std::string, double>& params,
                      const char* key, const char* type) {
  const auto it = params.find(key);
  if (it == params.end())
    throw std::invalid_argument(std::string("apply_distortion: ") + type +
                                " requires param \"" + key + "\"");
  return it->second;
}

}  // namespace

Image apply_distortion(const Image& img, const BBox& box, DistortionType dtype,
                       const std::map<std::string, double>& params, Rng& rng,
                       std::map<std::string, double>* drawn) {
  check_pixel_box(box, img.rows(), img.cols(), "apply_distortion");
  const auto [x0, y0, x1, y1] = box.iround();
  const int bw = x1 - x0, bh = y1 - y0;

  switch (dtype) {
    case DistortionType::kBlank: {
      Image out = img;
      out.block(y0, x0, bh, bw).setZero();
      return out;
    }
    case DistortionType::kBlurred:
      return blur_region(img, box, required_param(params, "sigma", "blurred"));
    case DistortionType::kMislocate: {
      const int img_w = static_cast<int>(img.cols());
      const int img_h = static_cast<int>(img.rows());
      const std::int64_t nx = img_w - bw + 1, ny = img_h - bh + 1;
      const std::int64_t n_pos = nx * ny;
      if (n_pos <= 1)
        throw std::invalid_argument(
            "apply_distortion: mislocate impossible, box covers the whole "
            "image " + box.str());
      const bool disjoint_possible = x0 >= bw || img_w - x1 >= bw ||
                                     y0 >= bh || img_h - y1 >= bh;
      int sx = x0, sy = y0;
      if (disjoint_possible) {
        bool ok = false;
        for (int attempt = 0; attempt < 1000 && !ok; ++attempt) {
          sx = static_cast<int>(rng.uniform_int(0, img_w - bw));
          sy = static_cast<int>(rng.uniform_int(0, img_h - bh));
          const BBox src{static_cast<double>(sx), static_cast<double>(sy),
                         static_cast<double>(sx + bw),
                         static_cast<double>(sy + bh)};
          ok = intersection_area(src, box) == 0.0;
        }
        if (!ok) {  // deterministic fallback scan
          for (std::int64_t i = 0; i < n_pos && !ok; ++i) {
            sx = static_cast<int>(i % nx);
            sy = static_cast<int>(i / nx);
            const BBox src{static_cast<double>(sx), static_cast<double>(sy),
                           static_cast<double>(sx + bw),
                           static_cast<double>(sy + bh)};
            ok = intersection_area(src, box) == 0.0;
          }
        }
      } else {
        // No disjoint source exists; any distinct offset will do.
        const std::int64_t cur = static_cast<std::int64_t>(y0) * nx + x0;
        std::int64_t idx = rng.uniform_int(0, n_pos - 2);
        if (idx >= cur) ++idx;
        sx = static_cast<int>(idx % nx);
        sy = static_cast<int>(idx / nx);
      }
      const Image src_patch = img.block(sy, sx, bh, bw);
      Image out = img;
      out.block(y0, x0, bh, bw) = src_patch;
      if (drawn) {
        (*drawn)["src_x0"] = sx;
        (*drawn)["src_y0"] = sy;
      }
      return out;
    }
    case DistortionType::kSaltPepper: {
      const double fraction = required_param(params, "fraction", "salt_pepper");
      Image out = img;
      for (int r = y0; r < y1; ++r)
        for (int c = x0; c < x1; ++c)
          if (rng.bernoulli(fraction))
            out(r, c) = rng.bernoulli(0.5) ? 1.0f : 0.0f;
      return out;
    }
    case DistortionType::kRotate: {
      const int k =
          static_cast<int>(required_param(params, "quarter_turns", "rotate"));
      if (k < 1 || k > 3)
        throw std::invalid_argument("apply_distortion: quarter_turns must be 1..3");
      if ((k % 2) == 1 && bw != bh)
        throw std::invalid_argument(
            "apply_distortion: odd quarter turns need a square box, got " +
            box.str());
      Image region = img.block(y0, x0, bh, bw);
      for (int t = 0; t < k; ++t) {
        // 90 degrees counterclockwise: out(r,c) = in(c, W-1-r).
        Image rot(region.cols(), region.rows());
        for (Eigen::Index r = 0; r < rot.rows(); ++r)
          for (Eigen::Index c = 0; c < rot.cols(); ++c)
            rot(r, c) = region(c, region.cols() - 1 - r);
        region = std::move(rot);
      }
      Image out = img;
      out.block(y0, x0, bh, bw) = region;
      return out;
    }
    case DistortionType::kSpeckle: {
      const double sigma = required_param(params, "sigma", "speckle");
      Image out = img;
      for (int r = y0; r < y1; ++r)
        for (int c = x0; c < x1; ++c)
          out(r, c) = static_cast<float>(std::clamp(
              out(r, c) * (1.0 + rng.normal(0.0, sigma)), 0.0, 1.0));
      return out;
    }
  }
  throw std::invalid_argument("apply_distortion: unknown distortion type code " +
                              std::to_string(static_cast<int>(dtype)));
}

AnnotatedSample distort_sample(const Image& original,
                               const DistortionPlan& plan) {
  AnnotatedSample out;
  out.seed = plan.source_seed;
  Image running = original;
  for (std::size_t k = 0; k < plan.items.size(); ++k) {
    const auto& item = plan.items[k];
    check_pixel_box(item.box, original.rows(), original.cols(),
                    "distort_sample");
    DistortionRecord rec;
    rec.dtype = item.dtype;
    rec.box = item.box;
    rec.original_patch = crop(original, item.box);
    rec.region_mask = mask_from_box(item.box, original.rows(), original.cols());
    rec.params = item.params;

    Rng rng(plan.source_seed, Rng::compose(0x9d15, k));
    running = apply_distortion(running, item.box, item.dtype, item.params, rng,
                               &rec.params);
    out.records.push_back(std::move(rec));
  }
  out.distorted = std::move(running);
  return out;
}

void write_preview(const Image& original, const AnnotatedSample& sample,
                   const std::filesystem::path& path) {
  static constexpr std::uint8_t palette[6][3] = {
      {230, 60, 60},   // blank
      {60, 130, 230},  // blurred
      {240, 180, 40},  // mislocate
      {200, 70, 200},  // salt & pepper
      {70, 200, 90},   // rotate
      {70, 220, 220},  // speckle
  };
  const int h = static_cast<int>(original.rows());
  const int w = static_cast<int>(original.cols());
  const int gap = 4;
  RgbImage canvas;
  canvas.height = h;
  canvas.width = w * 3 + gap * 2;
  canvas.data.assign(static_cast<size_t>(canvas.height) * canvas.width * 3, 255);

  const auto blit = [&](const Image& img, int c_off) {
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c) {
        const auto v = static_cast<std::uint8_t>(
            std::lround(std::clamp(img(r, c), 0.0f, 1.0f) * 255.0f));
        canvas.set(r, c_off + c, v, v, v);
      }
  };
  blit(original, 0);
  blit(sample.distorted, w + gap);
  blit(sample.distorted, 2 * (w + gap));
  for (const auto& rec : sample.records) {
    const int idx = static_cast<int>(rec.dtype) - 1;
    BBox shifted = rec.box;
    shifted.x0 += 2 * (w + gap);
    shifted.x1 += 2 * (w + gap);
    canvas.draw_box_outline(shifted, palette[idx][0], palette[idx][1],
                            palette[idx][2]);
  }
  write_png_rgb8(path, canvas);
}

}  // namespace sslseg
