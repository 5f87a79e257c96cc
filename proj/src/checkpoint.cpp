#include "sslseg/checkpoint.hpp"

#include <cstring>
#include <fstream>

#include "sslseg/dataset.hpp"

namespace sslseg {

namespace {
constexpr char kMagic[12] = {'S', 'S', 'L', 'S', 'E', 'G',
                             'C', 'K', 'P', 'T', '0', '1'};
}

void save_checkpoint(const std::filesystem::path& path,
                     const CheckpointHeader& header,
                     const NamedParams& params) {
  nlohmann::json j{{"schema_version", header.schema_version},
                   {"phase", header.phase},
                   {"step", header.step},
                   {"seed", header.seed},
                   {"config_hash", header.config_hash},
                   {"net_config", header.net_config}};
  nlohmann::json plist = nlohmann::json::array();
  for (const auto& [name, values] : params)
    plist.push_back({{"name", name}, {"count", values.size()}});
  j["params"] = plist;
  const std::string head = j.dump();

  if (path.has_parent_path())
    std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + tmp.string());
    os.write(kMagic, sizeof(kMagic));
    const std::uint64_t len = head.size();
    os.write(reinterpret_cast<const char*>(&len), sizeof(len));
    os.write(head.data(), static_cast<std::streamsize>(head.size()));
    for (const auto& [name, values] : params)
      os.write(reinterpret_cast<const char*>(values.data()),
               static_cast<std::streamsize>(values.size() * sizeof(double)));
    if (!os) throw std::runtime_error("short write to " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::pair<CheckpointHeader, NamedParams> load_checkpoint(
    const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read checkpoint " + path.string());
  char magic[sizeof(kMagic)];
  is.read(magic, sizeof(magic));
  if (!is || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0)
    throw std::runtime_error("not a checkpoint file: " + path.string());
  std::uint64_t len = 0;
  is.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string head(len, '\0');
  is.read(head.data(), static_cast<std::streamsize>(len));
  if (!is) throw std::runtime_error("truncated checkpoint " + path.string());

  const nlohmann::json j = nlohmann::json::parse(head);
  CheckpointHeader header;
  header.schema_version = j.at("schema_version").get<int>();
  if (header.schema_version != kCheckpointSchemaVersion)
    throw std::runtime_error("checkpoint schema_version unsupported");
  header.phase = j.at("phase").get<std::string>();
  header.step = j.at("step").get<std::int64_t>();
  header.seed = j.at("seed").get<std::uint64_t>();
  header.config_hash = j.at("config_hash").get<std::uint64_t>();
  header.net_config = j.at("net_config");

  NamedParams params;
  for (const auto& p : j.at("params")) {
    const auto name = p.at("name").get<std::string>();
    const auto count = p.at("count").get<std::size_t>();
    std::vector<double> values(count);
    is.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(count * sizeof(double)));
    if (!is)
      throw std::runtime_error("truncated checkpoint blob: " + path.string());
    params.emplace_back(name, std::move(values));
  }
  return {header, params};
}

}  // namespace sslseg
