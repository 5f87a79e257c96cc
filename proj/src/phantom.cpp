#include "sslseg/phantom.hpp"

#include <cmath>
#include <cstdio>
#include <numeric>
#include <thread>

#include <nlohmann/json.hpp>

#include "sslseg/json_util.hpp"

namespace sslseg {

using nlohmann::json;

void PhantomParams::validate() const {
  if (image_size < 128)
    throw std::invalid_argument("phantom: image_size must be >= 128");
  if (n_tissue_bands.first < 1 || n_tissue_bands.first > n_tissue_bands.second)
    throw std::invalid_argument("phantom: n_tissue_bands range invalid");
  if (blob_count.first < 0 || blob_count.first > blob_count.second)
    throw std::invalid_argument("phantom: blob_count range invalid");
  if (!(blob_area_fraction.first > 0.0) ||
      blob_area_fraction.first >= blob_area_fraction.second ||
      blob_area_fraction.second > 0.2)
    throw std::invalid_argument("phantom: blob_area_fraction range invalid");
  if (texture_noise_sigma < 0.0 || texture_noise_sigma > 0.25)
    throw std::invalid_argument("phantom: texture_noise_sigma out of range");
  if (intensity_levels.empty())
    throw std::invalid_argument("phantom: intensity_levels empty");
  for (const double v : intensity_levels) {
    if (v < 0.0 || v > 1.0)
      throw std::invalid_argument("phantom: intensity level outside [0,1]");
    if (std::abs(blob_intensity - v) < 0.15)
      throw std::invalid_argument(
          "phantom: blob_intensity within 0.15 of a band intensity");
  }
  if (blob_intensity < 0.0 || blob_intensity > 1.0)
    throw std::invalid_argument("phantom: blob_intensity outside [0,1]");
}

json PhantomParams::to_json() const {
  return json{{"image_size", image_size},
              {"n_tissue_bands", {n_tissue_bands.first, n_tissue_bands.second}},
              {"blob_count", {blob_count.first, blob_count.second}},
              {"blob_area_fraction",
               {blob_area_fraction.first, blob_area_fraction.second}},
              {"texture_noise_sigma", texture_noise_sigma},
              {"intensity_levels", intensity_levels},
              {"blob_intensity", blob_intensity}};
}

PhantomParams PhantomParams::from_json(const json& j) {
  check_json_keys(j,
                  {"image_size", "n_tissue_bands", "blob_count",
                   "blob_area_fraction", "texture_noise_sigma",
                   "intensity_levels", "blob_intensity"},
                  "phantom params");
  PhantomParams p;
  p.image_size = json_get_or(j, "image_size", p.image_size);
  if (j.contains("n_tissue_bands"))
    p.n_tissue_bands = {j["n_tissue_bands"].at(0).get<int>(),
                        j["n_tissue_bands"].at(1).get<int>()};
  if (j.contains("blob_count"))
    p.blob_count = {j["blob_count"].at(0).get<int>(),
                    j["blob_count"].at(1).get<int>()};
  if (j.contains("blob_area_fraction"))
    p.blob_area_fraction = {j["blob_area_fraction"].at(0).get<double>(),
                            j["blob_area_fraction"].at(1).get<double>()};
  p.texture_noise_sigma =
      json_get_or(j, "texture_noise_sigma", p.texture_noise_sigma);
  if (j.contains("intensity_levels"))
    p.intensity_levels = j["intensity_levels"].get<std::vector<double>>();
  p.blob_intensity = json_get_or(j, "blob_intensity", p.blob_intensity);
  p.validate();
  return p;
}

namespace {

struct EllipseSpec {
  double ox, oy;      // center offset in unit space
  double a, b;        // semi-axes in unit space
  double cosw, sinw;  // rotation
};

struct BlobShape {
  std::vector<EllipseSpec> ellipses;
  double extent;  // unit-space radius bound
};

BlobShape draw_blob_shape(Rng& rng) {
  BlobShape shape;
  const int n = static_cast<int>(rng.uniform_int(1, 3));
  for (int e = 0; e < n; ++e) {
    EllipseSpec el{};
    if (e == 0) {
      el.ox = el.oy = 0.0;
      el.a = 1.0;
      el.b = rng.uniform(0.55, 1.0);
    } else {
      el.ox = rng.uniform(-0.7, 0.7);
      el.oy = rng.uniform(-0.7, 0.7);
      el.a = rng.uniform(0.45, 0.85);
      el.b = el.a * rng.uniform(0.55, 1.0);
    }
    const double w = rng.uniform(0.0, 3.14159265358979323846);
    el.cosw = std::cos(w);
    el.sinw = std::sin(w);
    shape.ellipses.push_back(el);
  }
  shape.extent = 0.0;
  for (const auto& el : shape.ellipses)
    shape.extent = std::max(shape.extent,
                            std::hypot(el.ox, el.oy) + std::max(el.a, el.b));
  return shape;
}

/// Normalized quadratic distance to the blob: <=1 inside.
double blob_field(const BlobShape& shape, double ux, double uy) {
  double d = std::numeric_limits<double>::infinity();
  for (const auto& el : shape.ellipses) {
    const double vx = ux - el.ox, vy = uy - el.oy;
    const double rx = vx * el.cosw + vy * el.sinw;
    const double ry = -vx * el.sinw + vy * el.cosw;
    d = std::min(d, (rx / el.a) * (rx / el.a) + (ry / el.b) * (ry / el.b));
  }
  return d;
}

std::int64_t raster_area(const BlobShape& shape, double cx, double cy,
                         double scale, int size) {
  const int rad = static_cast<int>(std::ceil(scale * shape.extent)) + 1;
  const int r0 = std::max(0, static_cast<int>(cy) - rad);
  const int r1 = std::min(size - 1, static_cast<int>(cy) + rad);
  const int c0 = std::max(0, static_cast<int>(cx) - rad);
  const int c1 = std::min(size - 1, static_cast<int>(cx) + rad);
  std::int64_t area = 0;
  for (int r = r0; r <= r1; ++r)
    for (int c = c0; c <= c1; ++c)
      if (blob_field(shape, (c - cx) / scale, (r - cy) / scale) <= 1.0) ++area;
  return area;
}

}  // namespace

SegSample generate_phantom(std::uint64_t seed, const PhantomParams& params) {
  params.validate();
  const int size = params.image_size;
  const double pi2 = 6.28318530717958647692;

  // Layered curved tissue bands.
  Rng rng_bands(seed, 1);
  const int n_bands =
      static_cast<int>(rng_bands.uniform_int(params.n_tissue_bands.first,
                                             params.n_tissue_bands.second));
  const int n_bounds = n_bands - 1;
  std::vector<std::vector<double>> bounds(n_bounds,
                                          std::vector<double>(size, 0.0));
  for (int i = 0; i < n_bounds; ++i) {
    const double base =
        size * (i + 1.0) / n_bands +
        rng_bands.uniform(-0.25 * size / n_bands, 0.25 * size / n_bands);
    const double amp = rng_bands.uniform(0.02, 0.06) * size;
    const double freq = rng_bands.uniform(0.5, 2.0);
    const double phase = rng_bands.uniform(0.0, pi2);
    for (int c = 0; c < size; ++c)
      bounds[i][c] = base + amp * std::sin(pi2 * freq * c / size + phase);
  }
  const int level_start = static_cast<int>(
      rng_bands.uniform_int(0, static_cast<int>(params.intensity_levels.size()) - 1));
  std::vector<float> band_value(n_bands);
  for (int b = 0; b < n_bands; ++b) {
    const double nominal =
        params.intensity_levels[(level_start + b) % params.intensity_levels.size()];
    band_value[b] = static_cast<float>(
        std::clamp(nominal + rng_bands.uniform(-0.02, 0.02), 0.0, 1.0));
  }

  Image img(size, size);
  for (int r = 0; r < size; ++r)
    for (int c = 0; c < size; ++c) {
      int band = 0;
      for (int i = 0; i < n_bounds; ++i)
        if (r > bounds[i][c]) band = i + 1;
      img(r, c) = band_value[band];
    }

  // Effusion-like bright blobs.
  SegSample sample;
  {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "ph_%016llx",
                  static_cast<unsigned long long>(seed));
    sample.sample_id = buf;
  }
  Rng rng_blobs(seed, 2);
  const int want =
      static_cast<int>(rng_blobs.uniform_int(params.blob_count.first,
                                             params.blob_count.second));
  const double img_area = static_cast<double>(size) * size;
  const double frac_lo = params.blob_area_fraction.first;
  const double frac_hi = params.blob_area_fraction.second;
  std::vector<BBox> taken;

  for (int b = 0; b < want; ++b) {
    bool placed = false;
    for (int attempt = 0; attempt < 60 && !placed; ++attempt) {
      BlobShape shape = draw_blob_shape(rng_blobs);
      const double margin = 0.15 * (frac_hi - frac_lo);
      const double target =
          rng_blobs.uniform(frac_lo + margin, frac_hi - margin) * img_area;

      double scale = std::sqrt(target / 3.14159265358979323846);
      const double edge = std::max(2.0, scale * shape.extent) + 3.0;
      if (2.0 * edge >= size - 4.0) continue;
      const double cx = rng_blobs.uniform(edge, size - edge);
      const double cy = rng_blobs.uniform(edge, size - edge);

      std::int64_t area = 0;
      for (int it = 0; it < 10; ++it) {
        area = raster_area(shape, cx, cy, scale, size);
        if (area > 0 && area >= frac_lo * img_area * 1.02 &&
            area <= frac_hi * img_area * 0.98)
          break;
        if (area <= 0) break;
        scale *= std::sqrt(target / static_cast<double>(area));
      }
      if (area <= 0 || area < frac_lo * img_area * 1.02 ||
          area > frac_hi * img_area * 0.98)
        continue;

      MaskImage mask = MaskImage::Zero(size, size);
      const int rad = static_cast<int>(std::ceil(scale * shape.extent)) + 2;
      const int r0 = std::max(0, static_cast<int>(cy) - rad);
      const int r1 = std::min(size - 1, static_cast<int>(cy) + rad);
      const int c0 = std::max(0, static_cast<int>(cx) - rad);
      const int c1 = std::min(size - 1, static_cast<int>(cx) + rad);
      for (int r = r0; r <= r1; ++r)
        for (int c = c0; c <= c1; ++c)
          if (blob_field(shape, (c - cx) / scale, (r - cy) / scale) <= 1.0)
            mask(r, c) = 1;
      if ((mask != 0).count() == 0) continue;
      BBox box = tight_box(mask);
      if (box.x0 < 2 || box.y0 < 2 || box.x1 > size - 2 || box.y1 > size - 2)
        continue;
      bool overlaps = false;
      const BBox inflated{box.x0 - 2, box.y0 - 2, box.x1 + 2, box.y1 + 2};
      for (const auto& t : taken)
        if (intersection_area(inflated, t) > 0.0) overlaps = true;
      if (overlaps) continue;

      // Composite with a soft edge; the hard d<=1 region is the ground truth.
      const float intensity = static_cast<float>(
          std::clamp(params.blob_intensity + rng_blobs.uniform(-0.02, 0.02),
                     0.0, 1.0));
      const double soft = 0.25;
      for (int r = std::max(0, r0 - 2); r <= std::min(size - 1, r1 + 2); ++r)
        for (int c = std::max(0, c0 - 2); c <= std::min(size - 1, c1 + 2);
             ++c) {
          const double d = blob_field(shape, (c - cx) / scale, (r - cy) / scale);
          const double alpha = std::clamp(0.5 + (1.0 - d) / (2.0 * soft), 0.0, 1.0);
          if (alpha > 0.0)
            img(r, c) = static_cast<float>(img(r, c) +
                                           alpha * (intensity - img(r, c)));
        }

      taken.push_back(box);
      SegInstance inst;
      inst.class_id = 1;
      inst.box = box;
      inst.mask = std::move(mask);
      sample.instances.push_back(std::move(inst));
      placed = true;
    }
    if (!placed)
      throw std::runtime_error(
          "generate_phantom: no valid blob placement after bounded retries "
          "(seed " + std::to_string(seed) + ")");
  }

  // Texture noise keeps the speckle/salt&pepper pretext tasks non-trivial.
  if (params.texture_noise_sigma > 0.0) {
    Rng rng_noise(seed, 3);
    for (int r = 0; r < size; ++r)
      for (int c = 0; c < size; ++c)
        img(r, c) = static_cast<float>(
            std::clamp(img(r, c) + rng_noise.normal(0.0, params.texture_noise_sigma),
                       0.0, 1.0));
  }

  sample.image = std::move(img);
  return sample;
}

Manifest generate_corpus(std::uint64_t seed, const PhantomParams& params,
                         int n, const std::array<double, 3>& split_ratios,
                         const std::filesystem::path& out_root, bool force,
                         int workers) {
  params.validate();
  if (n < 1) throw std::invalid_argument("generate_corpus: n must be >= 1");
  double sum = 0.0;
  for (const double r : split_ratios) {
    if (r < 0.0) throw std::invalid_argument("generate_corpus: negative split ratio");
    sum += r;
  }
  if (std::abs(sum - 1.0) > 1e-9)
    throw std::invalid_argument("generate_corpus: split ratios must sum to 1");
  if (std::filesystem::exists(out_root) &&
      !std::filesystem::is_empty(out_root) && !force)
    throw std::runtime_error("generate_corpus: output dir " +
                             out_root.string() +
                             " is not empty (use --force to overwrite)");
  std::filesystem::create_directories(out_root);

  const int n_train = static_cast<int>(std::floor(n * split_ratios[0]));
  const int n_val = static_cast<int>(std::floor(n * split_ratios[1]));

  std::vector<std::string> ids(n);
  for (int i = 0; i < n; ++i) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "ph%06d", i);
    ids[i] = buf;
  }

  const auto work = [&](int begin, int end) {
    for (int i = begin; i < end; ++i) {
      SegSample s = generate_phantom(Rng::compose(seed, i), params);
      s.sample_id = ids[i];
      save_sample(s, out_root);
    }
  };
  workers = std::max(1, workers);
  if (workers == 1) {
    work(0, n);
  } else {
    std::vector<std::thread> pool;
    const int chunk = (n + workers - 1) / workers;
    for (int w = 0; w < workers; ++w) {
      const int b = w * chunk, e = std::min(n, b + chunk);
      if (b < e) pool.emplace_back(work, b, e);
    }
    for (auto& t : pool) t.join();
  }

  Manifest m;
  m.kind = "seg";
  m.seed = seed;
  for (int i = 0; i < n; ++i) {
    const char* split = i < n_train ? "train" : (i < n_train + n_val ? "val" : "test");
    m.samples.emplace_back(ids[i], split);
  }
  m.save(out_root);
  return m;
}

}  // namespace sslseg
