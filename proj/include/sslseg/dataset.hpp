#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "sslseg/types.hpp"

namespace sslseg {

constexpr int kDatasetSchemaVersion = 1;

/// FNV-1a 64-bit; used for config/manifest fingerprints.
std::uint64_t fnv1a64(const void* data, std::size_t n);
std::uint64_t fnv1a64(const std::string& s);

/// Atomic text write: temp file in the same directory, then rename.
void write_text_atomic(const std::filesystem::path& path,
                       const std::string& text);
std::string read_text(const std::filesystem::path& path);

/// Run-length encoding of a binary mask: row-major scan, alternating run
/// lengths beginning with the number of leading zeros.
nlohmann::json rle_encode(const MaskImage& mask);
MaskImage rle_decode(const nlohmann::json& j);

/// Split assignment for every sample id in a dataset root.
struct Manifest {
  int schema_version = kDatasetSchemaVersion;
  std::string kind;  // "seg" or "pretext"
  std::uint64_t seed = 0;
  std::vector<std::pair<std::string, std::string>> samples;  // (id, split)

  std::vector<std::string> ids(const std::string& split = "") const;
  void save(const std::filesystem::path& root) const;
  static Manifest load(const std::filesystem::path& root);
};

/// Dataset layout under a root directory:
///   images/<id>.png     16-bit grayscale (distorted image / seg image)
///   ann/<id>.json       per-sample annotations
///   patches/<id>_<k>.png  pretext restoration targets
///   originals/<id>.png  pristine images written by the distort tool
///   manifest.json
void save_sample(const AnnotatedSample& s, const std::filesystem::path& root);
void save_sample(const SegSample& s, const std::filesystem::path& root);

AnnotatedSample load_annotated_sample(const std::filesystem::path& root,
                                      const std::string& id);
SegSample load_seg_sample(const std::filesystem::path& root,
                          const std::string& id);

/// What a 16-bit round trip turns the image into; handy for exact
/// save/load comparisons.
Image quantized16(const Image& img);

}  // namespace sslseg
