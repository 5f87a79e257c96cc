#include "sslseg/dataset.hpp"

#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "sslseg/png_io.hpp"

namespace sslseg {

using nlohmann::json;

std::uint64_t fnv1a64(const void* data, std::size_t n) {
  const auto* p = static_cast<const std::uint8_t*>(data);
  std::uint64_t h = 0xcbf29ce484222325ull;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= p[i];
    h *= 0x100000001b3ull;
  }
  return h;
}

std::uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

void write_text_atomic(const std::filesystem::path& path,
                       const std::string& text) {
  if (path.has_parent_path())
    std::filesystem::create_directories(path.parent_path());
  const std::filesystem::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("cannot write " + tmp.string());
    os << text;
  }
  std::filesystem::rename(tmp, path);
}

std::string read_text(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot read " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

json rle_encode(const MaskImage& mask) {
  std::vector<std::int64_t> counts;
  std::uint8_t current = 0;  // runs start at value 0
  std::int64_t run = 0;
  for (Eigen::Index r = 0; r < mask.rows(); ++r)
    for (Eigen::Index c = 0; c < mask.cols(); ++c) {
      const std::uint8_t v = mask(r, c) != 0 ? 1 : 0;
      if (v == current) {
        ++run;
      } else {
        counts.push_back(run);
        current = v;
        run = 1;
      }
    }
  counts.push_back(run);
  return json{{"size", {mask.rows(), mask.cols()}}, {"counts", counts}};
}

MaskImage rle_decode(const json& j) {
  const auto size = j.at("size");
  const Eigen::Index h = size.at(0).get<Eigen::Index>();
  const Eigen::Index w = size.at(1).get<Eigen::Index>();
  if (h <= 0 || w <= 0) throw std::invalid_argument("rle_decode: bad size");
  const auto counts = j.at("counts").get<std::vector<std::int64_t>>();
  MaskImage mask(h, w);
  Eigen::Index pos = 0;
  std::uint8_t current = 0;
  const Eigen::Index total = h * w;
  for (const auto run : counts) {
    if (run < 0 || pos + run > total)
      throw std::invalid_argument("rle_decode: counts exceed mask size");
    for (std::int64_t i = 0; i < run; ++i, ++pos)
      mask(pos / w, pos % w) = current;
    current = current ? 0 : 1;
  }
  if (pos != total)
    throw std::invalid_argument("rle_decode: counts sum != h*w");
  return mask;
}

std::vector<std::string> Manifest::ids(const std::string& split) const {
  std::vector<std::string> out;
  for (const auto& [id, s] : samples)
    if (split.empty() || s == split) out.push_back(id);
  return out;
}

void Manifest::save(const std::filesystem::path& root) const {
  json j{{"schema_version", schema_version}, {"kind", kind}, {"seed", seed}};
  json arr = json::array();
  for (const auto& [id, split] : samples)
    arr.push_back(json{{"id", id}, {"split", split}});
  j["samples"] = arr;
  write_text_atomic(root / "manifest.json", j.dump(2) + "\n");
}

Manifest Manifest::load(const std::filesystem::path& root) {
  const json j = json::parse(read_text(root / "manifest.json"));
  Manifest m;
  m.schema_version = j.at("schema_version").get<int>();
  if (m.schema_version != kDatasetSchemaVersion)
    throw std::runtime_error("manifest schema_version " +
                             std::to_string(m.schema_version) +
                             " unsupported (expected " +
                             std::to_string(kDatasetSchemaVersion) + ")");
  m.kind = j.at("kind").get<std::string>();
  m.seed = j.at("seed").get<std::uint64_t>();
  for (const auto& e : j.at("samples"))
    m.samples.emplace_back(e.at("id").get<std::string>(),
                           e.at("split").get<std::string>());
  return m;
}

namespace {

json box_to_json(const BBox& b) {
  if (!b.integral())
    throw std::invalid_argument("serialized boxes must be integral, got " +
                                b.str());
  const auto [x0, y0, x1, y1] = b.iround();
  return json::array({x0, y0, x1, y1});
}

BBox box_from_json(const json& j) {
  return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>(),
          j.at(3).get<double>()};
}

void check_loaded_box(const BBox& b, Eigen::Index h, Eigen::Index w,
                      const std::string& who) {
  if (!b.valid_in(static_cast<int>(w), static_cast<int>(h))) {
    std::ostringstream os;
    os << who << ": invalid box " << b.str() << " for " << w << "x" << h
       << " image";
    throw std::runtime_error(os.str());
  }
}

}  // namespace

void save_sample(const AnnotatedSample& s, const std::filesystem::path& root) {
  write_png16(root / "images" / (s.sample_id + ".png"), s.distorted);
  json rec_arr = json::array();
  for (std::size_t k = 0; k < s.records.size(); ++k) {
    const auto& r = s.records[k];
    const std::string patch_rel =
        "patches/" + s.sample_id + "_" + std::to_string(k) + ".png";
    write_png16(root / patch_rel, r.original_patch);
    rec_arr.push_back(json{{"dtype", static_cast<int>(r.dtype)},
                           {"box", box_to_json(r.box)},
                           {"params", r.params},
                           {"patch", patch_rel},
                           {"mask_rle", rle_encode(r.region_mask)}});
  }
  const json j{{"schema_version", kDatasetSchemaVersion},
               {"kind", "pretext"},
               {"sample_id", s.sample_id},
               {"seed", s.seed},
               {"original_ref", s.original_ref},
               {"records", rec_arr}};
  write_text_atomic(root / "ann" / (s.sample_id + ".json"), j.dump(2) + "\n");
}

AnnotatedSample load_annotated_sample(const std::filesystem::path& root,
                                      const std::string& id) {
  const json j = json::parse(read_text(root / "ann" / (id + ".json")));
  if (j.at("schema_version").get<int>() != kDatasetSchemaVersion)
    throw std::runtime_error("sample " + id + ": unsupported schema_version");
  if (j.at("kind").get<std::string>() != "pretext")
    throw std::runtime_error("sample " + id + ": not a pretext sample");
  AnnotatedSample s;
  s.sample_id = j.at("sample_id").get<std::string>();
  s.seed = j.at("seed").get<std::uint64_t>();
  s.original_ref = j.at("original_ref").get<std::string>();
  s.distorted = read_png16(root / "images" / (id + ".png"));
  const Eigen::Index h = s.distorted.rows(), w = s.distorted.cols();

  std::size_t k = 0;
  for (const auto& rj : j.at("records")) {
    const std::string who = "sample " + id + " record " + std::to_string(k);
    DistortionRecord r;
    r.dtype = [&] {
      try {
        return distortion_from_code(rj.at("dtype").get<int>());
      } catch (const std::invalid_argument& e) {
        throw std::runtime_error(who + ": " + e.what());
      }
    }();
    r.box = box_from_json(rj.at("box"));
    check_loaded_box(r.box, h, w, who);
    r.params = rj.at("params").get<std::map<std::string, double>>();
    r.original_patch = read_png16(root / rj.at("patch").get<std::string>());
    if (r.original_patch.rows() != static_cast<Eigen::Index>(r.box.height()) ||
        r.original_patch.cols() != static_cast<Eigen::Index>(r.box.width()))
      throw std::runtime_error(who + ": patch dims do not match box " +
                               r.box.str());
    r.region_mask = rle_decode(rj.at("mask_rle"));
    try {
      check_mask_matches_box(r.region_mask, r.box, h, w, who);
    } catch (const std::invalid_argument& e) {
      throw std::runtime_error(e.what());
    }
    s.records.push_back(std::move(r));
    ++k;
  }
  return s;
}

void save_sample(const SegSample& s, const std::filesystem::path& root) {
  write_png16(root / "images" / (s.sample_id + ".png"), s.image);
  json inst_arr = json::array();
  for (const auto& inst : s.instances)
    inst_arr.push_back(json{{"class_id", inst.class_id},
                            {"box", box_to_json(inst.box)},
                            {"mask_rle", rle_encode(inst.mask)}});
  const json j{{"schema_version", kDatasetSchemaVersion},
               {"kind", "seg"},
               {"sample_id", s.sample_id},
               {"instances", inst_arr}};
  write_text_atomic(root / "ann" / (s.sample_id + ".json"), j.dump(2) + "\n");
}

SegSample load_seg_sample(const std::filesystem::path& root,
                          const std::string& id) {
  const json j = json::parse(read_text(root / "ann" / (id + ".json")));
  if (j.at("schema_version").get<int>() != kDatasetSchemaVersion)
    throw std::runtime_error("sample " + id + ": unsupported schema_version");
  if (j.at("kind").get<std::string>() != "seg")
    throw std::runtime_error("sample " + id + ": not a seg sample");
  SegSample s;
  s.sample_id = j.at("sample_id").get<std::string>();
  s.image = read_png16(root / "images" / (id + ".png"));
  const Eigen::Index h = s.image.rows(), w = s.image.cols();

  std::size_t k = 0;
  for (const auto& ij : j.at("instances")) {
    const std::string who = "sample " + id + " instance " + std::to_string(k);
    SegInstance inst;
    inst.class_id = ij.at("class_id").get<int>();
    if (inst.class_id < 1)
      throw std::runtime_error(who + ": class_id must be >= 1");
    inst.box = box_from_json(ij.at("box"));
    check_loaded_box(inst.box, h, w, who);
    inst.mask = rle_decode(ij.at("mask_rle"));
    if (inst.mask.rows() != h || inst.mask.cols() != w)
      throw std::runtime_error(who + ": mask dims mismatch image");
    if ((inst.mask != 0).count() == 0)
      throw std::runtime_error(who + ": empty instance mask");
    const auto [x0, y0, x1, y1] = inst.box.iround();
    for (Eigen::Index r = 0; r < h; ++r)
      for (Eigen::Index c = 0; c < w; ++c)
        if (inst.mask(r, c) != 0 && (r < y0 || r >= y1 || c < x0 || c >= x1))
          throw std::runtime_error(who + ": mask extends outside its box " +
                                   inst.box.str());
    s.instances.push_back(std::move(inst));
    ++k;
  }
  return s;
}

Image quantized16(const Image& img) {
  Image out(img.rows(), img.cols());
  for (Eigen::Index r = 0; r < img.rows(); ++r)
    for (Eigen::Index c = 0; c < img.cols(); ++c)
      out(r, c) = dequantize16(quantize16(img(r, c)));
  return out;
}

}  // namespace sslseg
