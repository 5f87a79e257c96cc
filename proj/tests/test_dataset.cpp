#include <doctest.h>

#include <nlohmann/json.hpp>

#include "sslseg/dataset.hpp"
#include "sslseg/distortion.hpp"
#include "sslseg/png_io.hpp"
#include "testutil.hpp"

using namespace sslseg;
using nlohmann::json;
using test::TempDir;

namespace {

AnnotatedSample make_sample(std::uint64_t seed) {
  Rng rng(seed, 0);
  const Image original = test::random_image(rng, 96, 96);
  DistortionConfig cfg;
  cfg.count_range = {3, 3};
  cfg.size_range = {20, 30};
  Rng plan_rng(seed, 1);
  const DistortionPlan plan = sample_plan(plan_rng, cfg, 96, 96);
  AnnotatedSample s = distort_sample(original, plan);
  s.sample_id = "s" + std::to_string(seed);
  s.original_ref = "originals/s" + std::to_string(seed) + ".png";
  return s;
}

}  // namespace

TEST_SUITE("dataset") {

TEST_CASE("png 16-bit round trip stays within one quantization step") {
  TempDir dir("png");
  Rng rng(10, 0);
  const Image img = test::random_image(rng, 320, 320);
  write_png16(dir.path / "a.png", img);
  const Image back = read_png16(dir.path / "a.png");
  REQUIRE(back.rows() == img.rows());
  REQUIRE(back.cols() == img.cols());
  CHECK(test::max_abs_diff(back, img) <= 1.0 / 65535.0);
  CHECK(test::images_equal(back, quantized16(img)));
}

TEST_CASE("rle round-trips random masks") {
  Rng rng(11, 0);
  for (int trial = 0; trial < 20; ++trial) {
    const int h = static_cast<int>(rng.uniform_int(1, 40));
    const int w = static_cast<int>(rng.uniform_int(1, 40));
    MaskImage m(h, w);
    for (int r = 0; r < h; ++r)
      for (int c = 0; c < w; ++c)
        m(r, c) = rng.bernoulli(0.3) ? 1 : 0;
    const MaskImage back = rle_decode(rle_encode(m));
    REQUIRE(back.rows() == h);
    REQUIRE(back.cols() == w);
    CHECK((back == m).all());
  }
}

TEST_CASE("rle rejects counts that do not cover the mask") {
  json j{{"size", {4, 4}}, {"counts", {3, 2}}};
  CHECK_THROWS(rle_decode(j));
  json j2{{"size", {2, 2}}, {"counts", {5}}};
  CHECK_THROWS(rle_decode(j2));
}

TEST_CASE("annotated sample round-trips field-equal") {
  TempDir dir("ann");
  const AnnotatedSample s = make_sample(3);
  save_sample(s, dir.path);
  const AnnotatedSample back = load_annotated_sample(dir.path, s.sample_id);

  CHECK(back.sample_id == s.sample_id);
  CHECK(back.seed == s.seed);
  CHECK(back.original_ref == s.original_ref);
  REQUIRE(back.records.size() == s.records.size());
  CHECK(test::images_equal(back.distorted, quantized16(s.distorted)));
  for (std::size_t k = 0; k < s.records.size(); ++k) {
    CHECK(back.records[k].dtype == s.records[k].dtype);
    CHECK(back.records[k].box == s.records[k].box);
    CHECK(back.records[k].params == s.records[k].params);
    CHECK((back.records[k].region_mask == s.records[k].region_mask).all());
    CHECK(test::images_equal(back.records[k].original_patch,
                             quantized16(s.records[k].original_patch)));
  }
}

TEST_CASE("load rejects a record with x1 <= x0, naming the record index") {
  TempDir dir("bad");
  const AnnotatedSample s = make_sample(4);
  save_sample(s, dir.path);
  const auto ann_path = dir.path / "ann" / (s.sample_id + ".json");
  json j = json::parse(read_text(ann_path));
  auto box = j["records"][1]["box"];
  j["records"][1]["box"] = {box[2], box[1], box[0], box[3]};  // swap x0/x1
  write_text_atomic(ann_path, j.dump());
  CHECK_THROWS_WITH_AS(load_annotated_sample(dir.path, s.sample_id),
                       doctest::Contains("record 1"), std::runtime_error);
}

TEST_CASE("load rejects corrupted mask dims") {
  TempDir dir("badmask");
  const AnnotatedSample s = make_sample(5);
  save_sample(s, dir.path);
  const auto ann_path = dir.path / "ann" / (s.sample_id + ".json");
  json j = json::parse(read_text(ann_path));
  j["records"][0]["mask_rle"]["size"] = {32, 32};
  j["records"][0]["mask_rle"]["counts"] = {32 * 32};
  write_text_atomic(ann_path, j.dump());
  CHECK_THROWS(load_annotated_sample(dir.path, s.sample_id));
}

TEST_CASE("load rejects unknown schema_version") {
  TempDir dir("schema");
  const AnnotatedSample s = make_sample(6);
  save_sample(s, dir.path);
  const auto ann_path = dir.path / "ann" / (s.sample_id + ".json");
  json j = json::parse(read_text(ann_path));
  j["schema_version"] = 99;
  write_text_atomic(ann_path, j.dump());
  CHECK_THROWS_WITH_AS(load_annotated_sample(dir.path, s.sample_id),
                       doctest::Contains("schema_version"), std::runtime_error);
}

TEST_CASE("seg sample round-trips and rejects masks outside the box") {
  TempDir dir("seg");
  SegSample s;
  s.sample_id = "seg0";
  s.image = Image::Constant(48, 48, 0.25f);
  SegInstance inst;
  inst.class_id = 1;
  inst.mask = MaskImage::Zero(48, 48);
  inst.mask.block(10, 12, 6, 8).setConstant(1);
  inst.box = tight_box(inst.mask);
  s.instances.push_back(inst);
  save_sample(s, dir.path);

  const SegSample back = load_seg_sample(dir.path, "seg0");
  REQUIRE(back.instances.size() == 1);
  CHECK(back.instances[0].box == s.instances[0].box);
  CHECK((back.instances[0].mask == s.instances[0].mask).all());

  const auto ann_path = dir.path / "ann" / "seg0.json";
  json j = json::parse(read_text(ann_path));
  j["instances"][0]["box"] = {12, 10, 18, 14};  // smaller than the mask
  write_text_atomic(ann_path, j.dump());
  CHECK_THROWS_WITH_AS(load_seg_sample(dir.path, "seg0"),
                       doctest::Contains("outside its box"),
                       std::runtime_error);
}

TEST_CASE("manifest round trip and split filter") {
  TempDir dir("mani");
  Manifest m;
  m.kind = "seg";
  m.seed = 99;
  m.samples = {{"a", "train"}, {"b", "train"}, {"c", "val"}, {"d", "test"}};
  m.save(dir.path);
  const Manifest back = Manifest::load(dir.path);
  CHECK(back.kind == "seg");
  CHECK(back.seed == 99);
  CHECK(back.ids("train") == std::vector<std::string>{"a", "b"});
  CHECK(back.ids().size() == 4);
}

}  // TEST_SUITE
