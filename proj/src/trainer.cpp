#include "sslseg/trainer.hpp"

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <iostream>

#include <nlohmann/json.hpp>

#include "sslseg/json_util.hpp"
#include "sslseg/metrics.hpp"
#include "sslseg/net.hpp"
#include "sslseg/optimizer.hpp"
#include "sslseg/phantom.hpp"
#include "sslseg/png_io.hpp"

namespace sslseg {

using nlohmann::json;
using TrainScalar = float;

void TrainConfig::validate() const {
  if (steps < 0) throw std::invalid_argument("train: steps must be >= 0");
  if (batch_size < 1)
    throw std::invalid_argument("train: batch_size must be >= 1");
  if (optimizer != "adam")
    throw std::invalid_argument("train: unsupported optimizer \"" + optimizer +
                                "\" (only adam)");
  if (!(learning_rate > 0.0))
    throw std::invalid_argument("train: learning_rate must be positive");
  if (eval_every < 1 || checkpoint_every < 1)
    throw std::invalid_argument("train: eval/checkpoint cadence must be >= 1");
  if (label_limit < 0)
    throw std::invalid_argument("train: label_limit must be >= 0");
  if (data_root.empty()) throw std::invalid_argument("train: data_root unset");
  if (out_dir.empty()) throw std::invalid_argument("train: out_dir unset");
  net.validate();
  if (phase == Phase::kPretext) {
    distortion.validate();
    net.check_covers_sizes(distortion.size_range.first,
                           distortion.size_range.second);
  }
}

json TrainConfig::to_json() const {
  return json{{"phase", phase_name(phase)},
              {"steps", steps},
              {"batch_size", batch_size},
              {"optimizer", optimizer},
              {"learning_rate", learning_rate},
              {"seed", seed},
              {"data", data_root.string()},
              {"init", init},
              {"freeze_backbone", freeze_backbone},
              {"eval_every", eval_every},
              {"checkpoint_every", checkpoint_every},
              {"label_limit", label_limit},
              {"out_dir", out_dir.string()},
              {"net", net.to_json()},
              {"distortion", distortion.to_json()}};
}

TrainConfig TrainConfig::from_json(const json& j) {
  check_json_keys(j, {"phase", "steps", "batch_size", "optimizer",
                      "learning_rate", "seed", "data", "init",
                      "freeze_backbone", "eval_every", "checkpoint_every",
                      "label_limit", "out_dir", "net", "distortion"},
                  "train config");
  TrainConfig c;
  c.phase = phase_from_name(json_get_or<std::string>(j, "phase", "pretext"));
  c.steps = json_get_or(j, "steps", c.steps);
  c.batch_size = json_get_or(j, "batch_size", c.batch_size);
  c.optimizer = json_get_or<std::string>(j, "optimizer", c.optimizer);
  c.learning_rate = json_get_or(j, "learning_rate", c.learning_rate);
  c.seed = json_get_or<std::uint64_t>(j, "seed", c.seed);
  c.data_root = json_get_or<std::string>(j, "data", "");
  c.init = json_get_or<std::string>(j, "init", c.init);
  c.freeze_backbone = json_get_or(j, "freeze_backbone",
                                  c.phase == Phase::kDownstream);
  c.eval_every = json_get_or(j, "eval_every", c.eval_every);
  c.checkpoint_every = json_get_or(j, "checkpoint_every", c.checkpoint_every);
  c.label_limit = json_get_or(j, "label_limit", c.label_limit);
  c.out_dir = json_get_or<std::string>(j, "out_dir", "");
  if (j.contains("net")) c.net = NetConfig::from_json(j["net"]);
  if (j.contains("distortion"))
    c.distortion = DistortionConfig::from_json(j["distortion"]);
  return c;
}

namespace {

struct LoadedCorpus {
  Manifest manifest;
  std::filesystem::path root;
  std::vector<std::string> ids;          // for the requested split
  std::vector<Image> images;             // aligned with ids
  std::vector<SegSample> seg;            // only when labels requested
};

LoadedCorpus load_images(const std::filesystem::path& root,
                         const std::string& split, bool with_labels,
                         int expect_size,
                         std::optional<int> limit = std::nullopt) {
  LoadedCorpus out;
  out.root = root;
  out.manifest = Manifest::load(root);
  out.ids = out.manifest.ids(split);
  if (limit && static_cast<int>(out.ids.size()) > *limit)
    out.ids.resize(*limit);
  if (out.ids.empty())
    throw std::runtime_error("dataset " + root.string() + " has no \"" +
                             split + "\" samples");
  for (const auto& id : out.ids) {
    if (with_labels) {
      out.seg.push_back(load_seg_sample(root, id));
      out.images.push_back(out.seg.back().image);
    } else {
      out.images.push_back(read_png16(root / "images" / (id + ".png")));
    }
    const auto& img = out.images.back();
    if (img.rows() != expect_size || img.cols() != expect_size)
      throw std::runtime_error(
          "sample " + id + " is " + std::to_string(img.cols()) + "x" +
          std::to_string(img.rows()) + " but net input_size is " +
          std::to_string(expect_size));
  }
  return out;
}

using NetF = Net<TrainScalar>;

NetF::GtInstance gt_from_record(const DistortionRecord& rec, int head) {
  NetF::GtInstance g;
  g.class_id = static_cast<int>(rec.dtype);
  g.box = rec.box;
  g.patch_target =
      NetF::patch_target_from_image(rec.original_patch, head);
  return g;
}

NetF::GtInstance gt_from_instance(const SegInstance& inst, int head) {
  NetF::GtInstance g;
  g.class_id = inst.class_id;
  g.box = inst.box;
  // binary mask target: crop to the GT box, resample, re-threshold
  const auto [x0, y0, x1, y1] = inst.box.iround();
  Image crop_img(y1 - y0, x1 - x0);
  for (int r = 0; r < y1 - y0; ++r)
    for (int c = 0; c < x1 - x0; ++c)
      crop_img(r, c) = inst.mask(y0 + r, x0 + c) ? 1.0f : 0.0f;
  const Image soft = resize_bilinear(crop_img, head, head);
  g.patch_target = Tensor<TrainScalar>({head * head});
  for (int r = 0; r < head; ++r)
    for (int c = 0; c < head; ++c)
      g.patch_target.v[static_cast<std::int64_t>(r) * head + c] =
          soft(r, c) >= 0.5f ? TrainScalar(1) : TrainScalar(0);
  return g;
}

CheckpointHeader make_header(const TrainConfig& cfg, Phase phase,
                             std::int64_t step) {
  CheckpointHeader h;
  h.phase = phase_name(phase);
  h.step = step;
  h.seed = cfg.seed;
  h.net_config = cfg.net.to_json();
  h.config_hash = fnv1a64(cfg.to_json().dump());
  return h;
}

void save_net(const NetF& net, const TrainConfig& cfg, std::int64_t step,
              const std::filesystem::path& path) {
  save_checkpoint(path, make_header(cfg, net.phase(), step),
                  net.export_params());
}

/// Restores a checkpoint into a net of the requested phase. A pretext
/// checkpoint loaded into a downstream net keeps its freshly initialized
/// class/patch output layers (the transfer path).
NetF net_from_checkpoint(const std::filesystem::path& path, Phase want_phase,
                         const NetConfig& want_cfg, std::uint64_t init_seed) {
  const auto [header, params] = load_checkpoint(path);
  const NetConfig ckpt_cfg = NetConfig::from_json(header.net_config);
  const auto incompatible = [&](const std::string& what) {
    throw std::runtime_error("checkpoint " + path.string() +
                             " incompatible with config: " + what);
  };
  if (ckpt_cfg.input_size != want_cfg.input_size) incompatible("input_size");
  if (ckpt_cfg.backbone_channels != want_cfg.backbone_channels)
    incompatible("backbone_channels");
  if (ckpt_cfg.anchor_sides != want_cfg.anchor_sides)
    incompatible("anchor_sides");
  if (ckpt_cfg.roi_pool != want_cfg.roi_pool) incompatible("roi_pool");
  if (ckpt_cfg.patch_head_skip != want_cfg.patch_head_skip)
    incompatible("patch_head_skip");

  const Phase ckpt_phase = phase_from_name(header.phase);
  if (ckpt_phase == want_phase) {
    const int ckpt_classes = ckpt_phase == Phase::kPretext
                                 ? ckpt_cfg.num_pretext_classes
                                 : ckpt_cfg.num_downstream_classes;
    const int want_classes = want_phase == Phase::kPretext
                                 ? want_cfg.num_pretext_classes
                                 : want_cfg.num_downstream_classes;
    if (ckpt_classes != want_classes) incompatible("class count");
    NetF net(want_cfg, want_phase, init_seed);
    net.import_params(params);
    return net;
  }
  if (ckpt_phase == Phase::kPretext && want_phase == Phase::kDownstream) {
    NetF net(want_cfg, want_phase, init_seed);
    net.import_params(params, {"head.cls.", "patch.out."});
    return net;
  }
  incompatible("phase " + header.phase);
  throw std::logic_error("unreachable");
}

struct StepLogger {
  std::ofstream loss_log;
  std::ofstream timing_log;
  explicit StepLogger(const std::filesystem::path& out_dir) {
    std::filesystem::create_directories(out_dir);
    loss_log.open(out_dir / "train_log.jsonl", std::ios::trunc);
    timing_log.open(out_dir / "timing.jsonl", std::ios::trunc);
    if (!loss_log || !timing_log)
      throw std::runtime_error("cannot open training logs in " +
                               out_dir.string());
  }
  // wall time goes to the side file so the loss log is bit-reproducible
  void log(int step, const LossReport& report, double wall_ms) {
    json j = report.to_json();
    j["step"] = step;
    loss_log << j.dump() << "\n";
    loss_log.flush();
    timing_log << json{{"step", step}, {"wall_ms", wall_ms}}.dump() << "\n";
    timing_log.flush();
  }
  void note(const json& j) {
    loss_log << j.dump() << "\n";
    loss_log.flush();
  }
};

double mean_psnr_delta(NetF& net, const std::vector<Image>& originals,
                       const DistortionConfig& dcfg, std::uint64_t seed) {
  double total = 0.0;
  for (std::size_t i = 0; i < originals.size(); ++i) {
    Rng rng(seed, Rng::compose(0xEA11, i));
    const DistortionPlan plan =
        sample_plan(rng, dcfg, static_cast<int>(originals[i].rows()),
                    static_cast<int>(originals[i].cols()));
    const AnnotatedSample s = distort_sample(originals[i], plan);
    const Image recovered =
        recover_image(s.distorted, net.forward_infer(s.distorted));
    total += psnr(originals[i], recovered) - psnr(originals[i], s.distorted);
  }
  return total / static_cast<double>(originals.size());
}

double mean_dice(NetF& net, const std::vector<SegSample>& samples) {
  double total = 0.0;
  for (const auto& s : samples) {
    const auto dets = net.forward_infer(s.image);
    MaskImage pred = MaskImage::Zero(s.image.rows(), s.image.cols());
    for (const auto& d : dets) {
      auto [x0, y0, x1, y1] = d.box.iround();
      x0 = std::clamp(x0, 0, static_cast<int>(s.image.cols()));
      x1 = std::clamp(x1, 0, static_cast<int>(s.image.cols()));
      y0 = std::clamp(y0, 0, static_cast<int>(s.image.rows()));
      y1 = std::clamp(y1, 0, static_cast<int>(s.image.rows()));
      if (x1 - x0 < 1 || y1 - y0 < 1) continue;
      const Image prob = resize_bilinear(d.patch, y1 - y0, x1 - x0);
      for (int r = 0; r < y1 - y0; ++r)
        for (int c = 0; c < x1 - x0; ++c)
          if (prob(r, c) >= 0.5f) pred(y0 + r, x0 + c) = 1;
    }
    MaskImage gt = MaskImage::Zero(s.image.rows(), s.image.cols());
    for (const auto& inst : s.instances)
      for (Eigen::Index r = 0; r < gt.rows(); ++r)
        for (Eigen::Index c = 0; c < gt.cols(); ++c)
          if (inst.mask(r, c)) gt(r, c) = 1;
    total += dice_pixel(pred, gt);
  }
  return total / static_cast<double>(samples.size());
}

struct TrainLoop {
  const TrainConfig& cfg;
  NetF& net;
  StepLogger& logger;

  TrainResult run(
      const std::function<NetF::TrainBatch(int step, std::vector<Image>&)>&
          next_batch,
      const std::function<double()>& validate) {
    Adam<TrainScalar> adam(cfg.learning_rate);
    const auto mask = net.trainable_mask(cfg.freeze_backbone);
    TrainResult result;
    result.best_validation = -std::numeric_limits<double>::infinity();
    const auto final_path = cfg.out_dir / "final.ckpt";
    const auto best_path = cfg.out_dir / "best.ckpt";
    const auto last_path = cfg.out_dir / "last.ckpt";
    bool have_last = false;

    for (int step = 0; step < cfg.steps; ++step) {
      const auto t0 = std::chrono::steady_clock::now();
      std::vector<Image> storage;
      const NetF::TrainBatch batch = next_batch(step, storage);

      Tape<TrainScalar> tape(true);
      net.bind_params(tape, cfg.freeze_backbone);
      const auto out = net.forward_train(tape, batch);
      const auto bundle = total_loss(tape, out.loss, net.phase());
      if (!std::isfinite(bundle.report.l_total))
        throw std::runtime_error(
            "NaN/inf loss at step " + std::to_string(step) +
            (have_last ? "; last good checkpoint: " + last_path.string()
                       : "; no checkpoint written yet"));
      tape.backward(bundle.total);

      std::vector<Tensor<TrainScalar>*> params = net.param_values();
      std::vector<const Tensor<TrainScalar>*> grads;
      for (std::size_t i = 0; i < params.size(); ++i)
        grads.push_back(&tape.grad(net.bound_param_ids()[i]));
      adam.step(params, grads, mask);

      const double wall_ms =
          std::chrono::duration<double, std::milli>(
              std::chrono::steady_clock::now() - t0)
              .count();
      logger.log(step, bundle.report, wall_ms);
      result.last_report = bundle.report;
      result.steps_run = step + 1;

      if ((step + 1) % cfg.checkpoint_every == 0) {
        save_net(net, cfg, step + 1, last_path);
        have_last = true;
      }
      if ((step + 1) % cfg.eval_every == 0 && validate) {
        const double score = validate();
        logger.note(json{{"step", step}, {"validation", score}});
        if (score > result.best_validation) {
          result.best_validation = score;
          save_net(net, cfg, step + 1, best_path);
          result.best_checkpoint = best_path;
        }
      }
    }
    save_net(net, cfg, cfg.steps, final_path);
    result.final_checkpoint = final_path;
    return result;
  }
};

}  // namespace

TrainResult pretrain(const TrainConfig& cfg) {
  if (cfg.phase != Phase::kPretext)
    throw std::invalid_argument("pretrain: config phase must be pretext");
  cfg.validate();

  const auto train =
      load_images(cfg.data_root, "train", false, cfg.net.input_size);
  std::vector<Image> val_images;
  if (!Manifest::load(cfg.data_root).ids("val").empty())
    val_images =
        load_images(cfg.data_root, "val", false, cfg.net.input_size).images;

  NetF net = cfg.init == "random"
                 ? NetF(cfg.net, Phase::kPretext, cfg.seed)
                 : net_from_checkpoint(cfg.init, Phase::kPretext, cfg.net,
                                       cfg.seed);
  StepLogger logger(cfg.out_dir);
  write_text_atomic(cfg.out_dir / "resolved_config.json",
                    cfg.to_json().dump(2) + "\n");

  const int head = cfg.net.head_output;
  const int n_train = static_cast<int>(train.images.size());
  TrainLoop loop{cfg, net, logger};
  return loop.run(
      [&](int step, std::vector<Image>& storage) {
        NetF::TrainBatch batch;
        Rng pick(cfg.seed, Rng::compose(0xBA7C4, step));
        storage.reserve(cfg.batch_size);
        for (int b = 0; b < cfg.batch_size; ++b) {
          const int idx = static_cast<int>(pick.uniform_int(0, n_train - 1));
          const Image& original = train.images[idx];
          Rng plan_rng(cfg.seed, Rng::compose(0xD157, step, idx));
          const DistortionPlan plan =
              sample_plan(plan_rng, cfg.distortion,
                          static_cast<int>(original.rows()),
                          static_cast<int>(original.cols()));
          AnnotatedSample s = distort_sample(original, plan);
          storage.push_back(std::move(s.distorted));
          std::vector<NetF::GtInstance> gts;
          for (const auto& rec : s.records)
            gts.push_back(gt_from_record(rec, head));
          batch.gts.push_back(std::move(gts));
        }
        for (const auto& img : storage) batch.images.push_back(&img);
        return batch;
      },
      val_images.empty() ? std::function<double()>()
                         : std::function<double()>([&] {
                             return mean_psnr_delta(net, val_images,
                                                    cfg.distortion, cfg.seed);
                           }));
}

TrainResult finetune(const TrainConfig& cfg) {
  if (cfg.phase != Phase::kDownstream)
    throw std::invalid_argument("finetune: config phase must be downstream");
  cfg.validate();

  const auto train = load_images(
      cfg.data_root, "train", true, cfg.net.input_size,
      cfg.label_limit > 0 ? std::optional<int>(cfg.label_limit)
                          : std::nullopt);
  std::vector<SegSample> val_samples;
  if (!Manifest::load(cfg.data_root).ids("val").empty())
    val_samples =
        load_images(cfg.data_root, "val", true, cfg.net.input_size).seg;

  NetF net = cfg.init == "random"
                 ? NetF(cfg.net, Phase::kDownstream, cfg.seed)
                 : net_from_checkpoint(cfg.init, Phase::kDownstream, cfg.net,
                                       cfg.seed);
  StepLogger logger(cfg.out_dir);
  write_text_atomic(cfg.out_dir / "resolved_config.json",
                    cfg.to_json().dump(2) + "\n");

  const int head = cfg.net.head_output;
  const int n_train = static_cast<int>(train.seg.size());
  const std::uint64_t backbone_before = net.backbone_checksum();

  TrainLoop loop{cfg, net, logger};
  TrainResult result = loop.run(
      [&](int step, std::vector<Image>&) {
        NetF::TrainBatch batch;
        Rng pick(cfg.seed, Rng::compose(0xF17E, step));
        for (int b = 0; b < cfg.batch_size; ++b) {
          const int idx = static_cast<int>(pick.uniform_int(0, n_train - 1));
          const SegSample& s = train.seg[idx];
          batch.images.push_back(&s.image);
          std::vector<NetF::GtInstance> gts;
          for (const auto& inst : s.instances)
            gts.push_back(gt_from_instance(inst, head));
          batch.gts.push_back(std::move(gts));
        }
        return batch;
      },
      val_samples.empty()
          ? std::function<double()>()
          : std::function<double()>([&] { return mean_dice(net, val_samples); }));

  if (cfg.freeze_backbone && net.backbone_checksum() != backbone_before)
    throw std::logic_error("finetune: frozen backbone changed");
  return result;
}

json evaluate_ssl(const std::filesystem::path& checkpoint,
                  const std::filesystem::path& data_root,
                  const SslEvalOptions& opts,
                  const std::filesystem::path& out_file) {
  const auto [header, params] = load_checkpoint(checkpoint);
  if (phase_from_name(header.phase) != Phase::kPretext)
    throw std::runtime_error("eval-ssl needs a pretext-phase checkpoint, got " +
                             header.phase);
  const NetConfig net_cfg = NetConfig::from_json(header.net_config);
  NetF net(net_cfg, Phase::kPretext, header.seed);
  net.import_params(params);
  opts.distortion.validate();

  const auto data =
      load_images(data_root, opts.split, false, net_cfg.input_size);
  json rows = json::array();
  SslEvalRow mean_acc;
  for (std::size_t i = 0; i < data.images.size(); ++i) {
    const Image& original = data.images[i];
    Rng rng(opts.seed, Rng::compose(0x55E, i));
    const DistortionPlan plan =
        sample_plan(rng, opts.distortion, static_cast<int>(original.rows()),
                    static_cast<int>(original.cols()));
    const AnnotatedSample s = distort_sample(original, plan);
    const auto dets = net.forward_infer(s.distorted);
    const Image recovered = recover_image(s.distorted, dets);
    const SslEvalRow row = eval_ssl({original, s.distorted, recovered});
    json rj = ssl_row_to_json(row);
    rj["sample_id"] = data.ids[i];
    rj["detections"] = dets.size();
    rows.push_back(rj);
    mean_acc.ssim_dist += row.ssim_dist;
    mean_acc.ssim_ssl += row.ssim_ssl;
    mean_acc.psnr_dist += row.psnr_dist;
    mean_acc.psnr_ssl += row.psnr_ssl;
    mean_acc.cs_dist += row.cs_dist;
    mean_acc.cs_ssl += row.cs_ssl;

    if (!opts.dump_dir.empty()) {
      std::filesystem::create_directories(opts.dump_dir);
      write_png16(opts.dump_dir / (data.ids[i] + "_original.png"), original);
      write_png16(opts.dump_dir / (data.ids[i] + "_distorted.png"),
                  s.distorted);
      write_png16(opts.dump_dir / (data.ids[i] + "_recovered.png"), recovered);
    }
  }
  const double n = static_cast<double>(data.images.size());
  const SslEvalRow means =
      make_ssl_row(mean_acc.ssim_dist / n, mean_acc.ssim_ssl / n,
                   mean_acc.psnr_dist / n, mean_acc.psnr_ssl / n,
                   mean_acc.cs_dist / n, mean_acc.cs_ssl / n);
  json report{{"schema_version", 1},
              {"kind", "ssl_eval"},
              {"checkpoint", checkpoint.string()},
              {"split", opts.split},
              {"seed", opts.seed},
              {"rows", rows},
              {"means", ssl_row_to_json(means)}};
  if (!out_file.empty())
    write_text_atomic(out_file, report.dump(2) + "\n");
  return report;
}

json evaluate_seg(const std::filesystem::path& checkpoint,
                  const std::filesystem::path& data_root,
                  const std::string& split,
                  const std::filesystem::path& out_file) {
  const auto [header, params] = load_checkpoint(checkpoint);
  if (phase_from_name(header.phase) != Phase::kDownstream)
    throw std::runtime_error(
        "eval-seg needs a downstream-phase checkpoint, got " + header.phase);
  const NetConfig net_cfg = NetConfig::from_json(header.net_config);
  NetF net(net_cfg, Phase::kDownstream, header.seed);
  net.import_params(params);

  const auto data = load_images(data_root, split, true, net_cfg.input_size);
  json rows = json::array();
  SegEvalRow agg;
  PixelCounts pooled;
  double dice_sum = 0.0;
  for (const auto& s : data.seg) {
    const auto dets = net.forward_infer(s.image);
    std::vector<std::pair<int, BBox>> gts;
    for (const auto& inst : s.instances)
      gts.emplace_back(inst.class_id, inst.box);
    const MatchResult match = match_detections(dets, gts, 0.5);
    agg.tp += match.tp;
    agg.fp += match.fp;
    agg.fn += match.fn;

    MaskImage pred = MaskImage::Zero(s.image.rows(), s.image.cols());
    for (const auto& d : dets) {
      auto [x0, y0, x1, y1] = d.box.iround();
      x0 = std::clamp(x0, 0, static_cast<int>(s.image.cols()));
      x1 = std::clamp(x1, 0, static_cast<int>(s.image.cols()));
      y0 = std::clamp(y0, 0, static_cast<int>(s.image.rows()));
      y1 = std::clamp(y1, 0, static_cast<int>(s.image.rows()));
      if (x1 - x0 < 1 || y1 - y0 < 1) continue;
      const Image prob = resize_bilinear(d.patch, y1 - y0, x1 - x0);
      for (int r = 0; r < y1 - y0; ++r)
        for (int c = 0; c < x1 - x0; ++c)
          if (prob(r, c) >= 0.5f) pred(y0 + r, x0 + c) = 1;
    }
    MaskImage gt = MaskImage::Zero(s.image.rows(), s.image.cols());
    for (const auto& inst : s.instances)
      for (Eigen::Index r = 0; r < gt.rows(); ++r)
        for (Eigen::Index c = 0; c < gt.cols(); ++c)
          if (inst.mask(r, c)) gt(r, c) = 1;
    const PixelCounts pc = dice_counts(pred, gt);
    pooled.tp += pc.tp;
    pooled.fp += pc.fp;
    pooled.fn += pc.fn;
    const double dice = dice_pixel(pred, gt);
    dice_sum += dice;
    rows.push_back(json{{"sample_id", s.sample_id},
                        {"tp", match.tp},
                        {"fp", match.fp},
                        {"fn", match.fn},
                        {"dice", dice},
                        {"detections", dets.size()}});
  }
  const PrecisionRecall prf = detection_prf(agg.tp, agg.fp, agg.fn);
  agg.precision = prf.precision;
  agg.recall = prf.recall;
  agg.dice_macro = dice_sum / static_cast<double>(data.seg.size());
  const std::int64_t micro_denom = 2 * pooled.tp + pooled.fp + pooled.fn;
  agg.dice_micro = micro_denom == 0
                       ? 1.0
                       : 2.0 * static_cast<double>(pooled.tp) /
                             static_cast<double>(micro_denom);

  json report{{"schema_version", 1},
              {"kind", "seg_eval"},
              {"checkpoint", checkpoint.string()},
              {"split", split},
              {"aggregate", seg_row_to_json(agg)},
              {"rows", rows}};
  if (!out_file.empty())
    write_text_atomic(out_file, report.dump(2) + "\n");
  return report;
}

void ExperimentGrid::validate() const {
  if (label_sizes.empty() || seeds.empty())
    throw std::invalid_argument("grid: label_sizes and seeds must be nonempty");
  for (const int s : pretrain_sizes)
    if (s < 1) throw std::invalid_argument("grid: pretrain size < 1");
  for (const int s : label_sizes)
    if (s < 1) throw std::invalid_argument("grid: label size < 1");
  if (val_count < 1 || test_count < 1)
    throw std::invalid_argument("grid: val/test counts must be >= 1");
}

json ExperimentGrid::to_json() const {
  return json{{"pretrain_sizes", pretrain_sizes},
              {"label_sizes", label_sizes},
              {"seeds", seeds},
              {"val_count", val_count},
              {"test_count", test_count}};
}

ExperimentGrid ExperimentGrid::from_json(const json& j) {
  check_json_keys(j, {"pretrain_sizes", "label_sizes", "seeds", "val_count",
                      "test_count"},
                  "experiment grid");
  ExperimentGrid g;
  if (j.contains("pretrain_sizes"))
    g.pretrain_sizes = j["pretrain_sizes"].get<std::vector<int>>();
  if (j.contains("label_sizes"))
    g.label_sizes = j["label_sizes"].get<std::vector<int>>();
  if (j.contains("seeds"))
    g.seeds = j["seeds"].get<std::vector<std::uint64_t>>();
  g.val_count = json_get_or(j, "val_count", g.val_count);
  g.test_count = json_get_or(j, "test_count", g.test_count);
  g.validate();
  return g;
}

namespace {

/// Corpus cache: the DISTORT_SSL_CACHE env var names a directory where
/// generated corpora are keyed by (params, seed, n) and reused across runs.
std::filesystem::path corpus_dir(const std::filesystem::path& fallback_root,
                                 const PhantomParams& params,
                                 std::uint64_t seed, int n,
                                 const std::array<double, 3>& ratios,
                                 const std::string& tag) {
  json key{{"params", params.to_json()},
           {"seed", seed},
           {"n", n},
           {"ratios", ratios}};
  char hash[32];
  std::snprintf(hash, sizeof(hash), "%016llx",
                static_cast<unsigned long long>(fnv1a64(key.dump())));
  const char* cache = std::getenv("DISTORT_SSL_CACHE");
  const std::filesystem::path base =
      cache && *cache ? std::filesystem::path(cache) : fallback_root;
  return base / (tag + "_" + hash);
}

std::filesystem::path ensure_corpus(const std::filesystem::path& fallback_root,
                                    const PhantomParams& params,
                                    std::uint64_t seed, int n,
                                    const std::array<double, 3>& ratios,
                                    const std::string& tag) {
  const auto dir = corpus_dir(fallback_root, params, seed, n, ratios, tag);
  if (std::filesystem::exists(dir / "manifest.json")) {
    Manifest::load(dir);  // validate before trusting the cache
    return dir;
  }
  generate_corpus(seed, params, n, ratios, dir, true, 1);
  return dir;
}

}  // namespace

json run_grid(const ExperimentGrid& grid, const TrainConfig& base,
              const PhantomParams& phantom,
              const std::filesystem::path& out_dir) {
  grid.validate();
  phantom.validate();
  std::filesystem::create_directories(out_dir);

  const int max_label =
      *std::max_element(grid.label_sizes.begin(), grid.label_sizes.end());
  const int labeled_total = max_label + grid.val_count + grid.test_count;
  const std::array<double, 3> labeled_ratios = {
      static_cast<double>(max_label) / labeled_total,
      static_cast<double>(grid.val_count) / labeled_total,
      static_cast<double>(grid.test_count) / labeled_total};

  // labeled corpus shared by every cell; label subsets nest by id order
  const auto labeled_root = ensure_corpus(out_dir / "data", phantom,
                                          Rng::compose(base.seed, 0x1ab5),
                                          labeled_total, labeled_ratios,
                                          "labeled");

  json cells = json::array();
  struct ArmKey {
    std::string arm;
    int pretrain_size = 0;
  };
  std::vector<ArmKey> arms;
  arms.push_back({"scratch", 0});
  for (const int ps : grid.pretrain_sizes)
    arms.push_back({"ssl_" + std::to_string(ps), ps});

  for (const std::uint64_t seed : grid.seeds) {
    // pretraining checkpoints per arm for this seed
    std::map<std::string, std::filesystem::path> arm_ckpt;
    for (const auto& arm : arms) {
      if (arm.pretrain_size == 0) continue;
      try {
        const auto corpus = ensure_corpus(
            out_dir / "data", phantom, Rng::compose(base.seed, arm.pretrain_size),
            arm.pretrain_size, {0.9, 0.1, 0.0}, "pretrain");
        TrainConfig pcfg = base;
        pcfg.phase = Phase::kPretext;
        pcfg.seed = seed;
        pcfg.data_root = corpus;
        pcfg.freeze_backbone = false;
        pcfg.init = "random";
        pcfg.out_dir = out_dir / ("pretrain_" + arm.arm + "_s" +
                                  std::to_string(seed));
        const TrainResult r = pretrain(pcfg);
        arm_ckpt[arm.arm] = r.best_checkpoint.empty() ? r.final_checkpoint
                                                      : r.best_checkpoint;
      } catch (const std::exception& e) {
        arm_ckpt[arm.arm].clear();
        std::cerr << "[grid] pretraining " << arm.arm << " seed " << seed
                  << " failed: " << e.what() << "\n";
      }
    }

    for (const auto& arm : arms)
      for (const int label_size : grid.label_sizes) {
        json cell{{"arm", arm.arm},
                  {"pretrain_size", arm.pretrain_size},
                  {"label_size", label_size},
                  {"seed", seed}};
        try {
          if (arm.pretrain_size > 0 && arm_ckpt[arm.arm].empty())
            throw std::runtime_error("pretraining for this arm failed");
          TrainConfig fcfg = base;
          fcfg.phase = Phase::kDownstream;
          fcfg.seed = Rng::compose(seed, label_size);
          fcfg.data_root = labeled_root;
          fcfg.freeze_backbone = true;
          fcfg.init = arm.pretrain_size == 0
                          ? "random"
                          : arm_ckpt[arm.arm].string();
          fcfg.out_dir = out_dir / ("finetune_" + arm.arm + "_l" +
                                    std::to_string(label_size) + "_s" +
                                    std::to_string(seed));
          // nested label subsets: cap the train split at label_size
          fcfg.label_limit = label_size;
          const TrainResult r = finetune(fcfg);
          const auto ckpt = r.best_checkpoint.empty() ? r.final_checkpoint
                                                      : r.best_checkpoint;
          const json eval = evaluate_seg(ckpt, labeled_root, "test",
                                         fcfg.out_dir / "seg_eval.json");
          cell["status"] = "ok";
          cell["metrics"] = eval["aggregate"];
        } catch (const std::exception& e) {
          cell["status"] = "failed";
          cell["error"] = e.what();
        }
        cells.push_back(cell);
      }
  }

  // per (arm, label_size) summary across seeds
  json summary = json::array();
  for (const auto& arm : arms)
    for (const int label_size : grid.label_sizes) {
      std::vector<double> dices, recalls, precisions;
      for (const auto& cell : cells) {
        if (cell["arm"] != arm.arm || cell["label_size"] != label_size ||
            cell["status"] != "ok")
          continue;
        dices.push_back(cell["metrics"]["dice_macro"].get<double>());
        recalls.push_back(cell["metrics"]["recall"].get<double>());
        precisions.push_back(cell["metrics"]["precision"].get<double>());
      }
      json s{{"arm", arm.arm},
             {"pretrain_size", arm.pretrain_size},
             {"label_size", label_size},
             {"cells_ok", dices.size()}};
      const auto stats = [](const std::vector<double>& v, json& dst,
                            const std::string& key) {
        if (v.empty()) return;
        double sum = 0, lo = v[0], hi = v[0];
        for (const double x : v) {
          sum += x;
          lo = std::min(lo, x);
          hi = std::max(hi, x);
        }
        dst[key + "_mean"] = sum / v.size();
        dst[key + "_min"] = lo;
        dst[key + "_max"] = hi;
      };
      stats(dices, s, "dice");
      stats(recalls, s, "recall");
      stats(precisions, s, "precision");
      summary.push_back(s);
    }

  json report{{"schema_version", 1},
              {"kind", "grid_report"},
              {"grid", grid.to_json()},
              {"cells", cells},
              {"summary", summary}};
  write_text_atomic(out_dir / "grid_report.json", report.dump(2) + "\n");
  return report;
}

}  // namespace sslseg
