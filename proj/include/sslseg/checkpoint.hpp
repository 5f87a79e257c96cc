#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

namespace sslseg {

constexpr int kCheckpointSchemaVersion = 1;

/// Training provenance carried with every parameter blob.
struct CheckpointHeader {
  int schema_version = kCheckpointSchemaVersion;
  std::string phase;  // "pretext" / "downstream"
  std::int64_t step = 0;
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;
  nlohmann::json net_config;
};

using NamedParams = std::vector<std::pair<std::string, std::vector<double>>>;

/// Binary layout: magic, u64 JSON header length, header (includes per-param
/// names/shapes), then all values as little-endian f64 in header order.
/// f32 training values survive the f64 round trip bit-exactly.
void save_checkpoint(const std::filesystem::path& path,
                     const CheckpointHeader& header, const NamedParams& params);

std::pair<CheckpointHeader, NamedParams> load_checkpoint(
    const std::filesystem::path& path);

}  // namespace sslseg
