#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "sslseg/distortion.hpp"
#include "sslseg/losses.hpp"
#include "sslseg/net_config.hpp"

namespace sslseg {

/// One training run, either phase. `data_root` holds a core-types dataset
/// (manifest.json + images). init is "random" or a checkpoint path.
struct TrainConfig {
  Phase phase = Phase::kPretext;
  int steps = 500;
  int batch_size = 4;
  std::string optimizer = "adam";
  double learning_rate = 0.001;
  std::uint64_t seed = 0;
  std::filesystem::path data_root;
  std::string init = "random";
  bool freeze_backbone = false;  // downstream runs default to true
  int eval_every = 100;
  int checkpoint_every = 200;
  int label_limit = 0;  // cap on train-split samples; 0 = use all
  std::filesystem::path out_dir;
  NetConfig net;
  DistortionConfig distortion;  // pretext phase only

  void validate() const;
  nlohmann::json to_json() const;
  static TrainConfig from_json(const nlohmann::json& j);
};

struct TrainResult {
  std::filesystem::path final_checkpoint;
  std::filesystem::path best_checkpoint;  // empty if no validation ran
  double best_validation = 0.0;           // psnr delta (pretext) / dice (seg)
  LossReport last_report;
  int steps_run = 0;
};

/// SSL pretraining: distortion is applied on the fly per step, keyed by
/// (seed, step, sample index), so the network sees fresh corruption every
/// step and the whole run is reproducible.
TrainResult pretrain(const TrainConfig& cfg);

/// Downstream fine-tuning on labeled SegSamples. With freeze_backbone the
/// backbone parameters stay bit-identical; init="random" is the
/// no-pretraining baseline arm.
TrainResult finetune(const TrainConfig& cfg);

struct SslEvalOptions {
  DistortionConfig distortion;
  std::uint64_t seed = 0;
  std::string split = "test";
  std::filesystem::path dump_dir;  // optional per-sample PNG dumps
};

/// Distorts each split image deterministically, runs recovery, and writes
/// the per-sample similarity table plus corpus means to out_file.
nlohmann::json evaluate_ssl(const std::filesystem::path& checkpoint,
                            const std::filesystem::path& data_root,
                            const SslEvalOptions& opts,
                            const std::filesystem::path& out_file);

/// Detection + segmentation metrics of a downstream checkpoint over a
/// split; writes seg_eval.json shaped output.
nlohmann::json evaluate_seg(const std::filesystem::path& checkpoint,
                            const std::filesystem::path& data_root,
                            const std::string& split,
                            const std::filesystem::path& out_file);

/// The pretrain-size x label-size x seed experiment matrix with a
/// from-scratch baseline arm.
struct ExperimentGrid {
  std::vector<int> pretrain_sizes = {2000, 200, 40};
  std::vector<int> label_sizes = {200, 50, 5};
  std::vector<std::uint64_t> seeds = {1, 2, 3};
  int val_count = 8;
  int test_count = 16;

  void validate() const;
  nlohmann::json to_json() const;
  static ExperimentGrid from_json(const nlohmann::json& j);
};

/// Generates (or reuses cached) phantom corpora, runs every
/// (arm x label_size x seed) cell, and writes grid_report.json plus a CSV
/// rendering. Failed cells are marked and the grid continues.
nlohmann::json run_grid(const ExperimentGrid& grid, const TrainConfig& base,
                        const struct PhantomParams& phantom,
                        const std::filesystem::path& out_dir);

}  // namespace sslseg
