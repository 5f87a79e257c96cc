#pragma once

#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "sslseg/dataset.hpp"
#include "sslseg/rng.hpp"
#include "sslseg/types.hpp"

namespace sslseg {

/// Knobs for the synthetic knee-like phantom: layered curved tissue bands,
/// 0..3 bright effusion-like blobs, and additive texture noise.
struct PhantomParams {
  int image_size = 320;
  std::pair<int, int> n_tissue_bands = {3, 6};
  std::pair<int, int> blob_count = {0, 3};
  std::pair<double, double> blob_area_fraction = {0.002, 0.02};
  double texture_noise_sigma = 0.02;
  std::vector<double> intensity_levels = {0.12, 0.25, 0.38, 0.52, 0.65};
  double blob_intensity = 0.88;  // near-brightest, confusable with tissue

  /// Throws invalid_argument naming the offending field.
  void validate() const;

  nlohmann::json to_json() const;
  static PhantomParams from_json(const nlohmann::json& j);
};

/// Deterministic phantom: same (seed, params) gives a bit-identical sample.
/// Each blob is a union of 1-3 overlapping ellipses with a softened edge;
/// the stored mask is the hard d<=1 region and the box is its tight bound.
SegSample generate_phantom(std::uint64_t seed, const PhantomParams& params);

/// Writes n phantoms plus a manifest under out_root. Per-sample seeds are
/// compose(global_seed, index), so output is byte-identical for any worker
/// count. split_ratios are (train, val, test) and must sum to 1.
Manifest generate_corpus(std::uint64_t seed, const PhantomParams& params,
                         int n, const std::array<double, 3>& split_ratios,
                         const std::filesystem::path& out_root,
                         bool force = false, int workers = 1);

}  // namespace sslseg
