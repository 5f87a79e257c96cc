#include "sslseg/cli.hpp"

#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "sslseg/distortion.hpp"
#include "sslseg/json_util.hpp"
#include "sslseg/metrics.hpp"
#include "sslseg/net.hpp"
#include "sslseg/phantom.hpp"
#include "sslseg/png_io.hpp"
#include "sslseg/trainer.hpp"

namespace sslseg {

using nlohmann::json;

namespace {

json load_json_file(const std::string& path) {
  return json::parse(read_text(path));
}

std::array<double, 3> parse_ratios(const std::string& s) {
  std::array<double, 3> out{};
  std::stringstream ss(s);
  std::string tok;
  int i = 0;
  while (std::getline(ss, tok, ',') && i < 3) out[i++] = std::stod(tok);
  if (i != 3)
    throw std::invalid_argument("--split expects three comma-separated ratios");
  return out;
}

/// Tracks where each effective setting came from, for the resolved-config
/// log the spec requires of every run.
struct Provenance {
  json sources = json::object();
  void note(const std::string& key, const std::string& source) {
    sources[key] = source;
  }
};

TrainConfig resolve_train_config(const std::string& config_path,
                                 const CLI::Option* seed_opt,
                                 std::uint64_t seed,
                                 const std::string& out_override,
                                 const std::string& data_override,
                                 int steps_override, Provenance& prov) {
  json j = config_path.empty() ? json::object() : load_json_file(config_path);
  for (const auto& [key, value] : j.items())
    prov.note(key, "file:" + config_path);
  TrainConfig cfg = TrainConfig::from_json(j);
  if (seed_opt && seed_opt->count() > 0) {
    cfg.seed = seed;
    prov.note("seed", "flag");
  }
  if (!out_override.empty()) {
    cfg.out_dir = out_override;
    prov.note("out_dir", "flag");
  }
  if (!data_override.empty()) {
    cfg.data_root = data_override;
    prov.note("data", "flag");
  }
  if (steps_override >= 0) {
    cfg.steps = steps_override;
    prov.note("steps", "flag");
  }
  return cfg;
}

void write_cli_config(const TrainConfig& cfg, const Provenance& prov) {
  std::filesystem::create_directories(cfg.out_dir);
  write_text_atomic(cfg.out_dir / "cli_config.json",
                    json{{"resolved", cfg.to_json()},
                         {"provenance", prov.sources}}
                            .dump(2) +
                        "\n");
  std::cout << "resolved config written to "
            << (cfg.out_dir / "cli_config.json").string() << "\n";
}

int cmd_gen_phantoms(int n, std::uint64_t seed, const std::string& out,
                     const std::string& params_path, const std::string& split,
                     bool force, int workers) {
  PhantomParams params;
  if (!params_path.empty())
    params = PhantomParams::from_json(load_json_file(params_path));
  const Manifest m = generate_corpus(seed, params, n, parse_ratios(split), out,
                                     force, workers);
  std::cout << "wrote " << m.samples.size() << " phantoms to " << out << "\n";
  return 0;
}

int cmd_distort(const std::string& in, const std::string& out,
                std::uint64_t seed, const std::string& config_path,
                bool preview, bool force) {
  DistortionConfig cfg;
  if (!config_path.empty())
    cfg = DistortionConfig::from_json(load_json_file(config_path));
  if (std::filesystem::exists(out) && !std::filesystem::is_empty(out) &&
      !force)
    throw std::runtime_error("output dir " + out +
                             " is not empty (use --force)");
  std::filesystem::create_directories(out);

  const Manifest src = Manifest::load(in);
  Manifest dst;
  dst.kind = "pretext";
  dst.seed = seed;
  int count = 0;
  for (const auto& [id, split] : src.samples) {
    const Image original =
        read_png16(std::filesystem::path(in) / "images" / (id + ".png"));
    Rng rng(seed, Rng::compose(0xD157, count));
    const DistortionPlan plan =
        sample_plan(rng, cfg, static_cast<int>(original.rows()),
                    static_cast<int>(original.cols()));
    AnnotatedSample sample = distort_sample(original, plan);
    sample.sample_id = id;
    sample.original_ref = "originals/" + id + ".png";
    write_png16(std::filesystem::path(out) / "originals" / (id + ".png"),
                original);
    save_sample(sample, out);
    if (preview)
      write_preview(original, sample,
                    std::filesystem::path(out) / "previews" / (id + ".png"));
    dst.samples.emplace_back(id, split);
    ++count;
  }
  dst.save(out);
  std::cout << "distorted " << count << " samples into " << out << "\n";
  return 0;
}

int cmd_report(const std::string& in, const std::string& out_dir,
               const std::string& montage_dir) {
  std::filesystem::create_directories(out_dir);
  if (!montage_dir.empty()) {
    int made = 0;
    for (const auto& entry : std::filesystem::directory_iterator(montage_dir)) {
      const std::string name = entry.path().filename().string();
      const std::string suffix = "_original.png";
      if (name.size() <= suffix.size() ||
          name.substr(name.size() - suffix.size()) != suffix)
        continue;
      const std::string id = name.substr(0, name.size() - suffix.size());
      const Image original = read_png16(entry.path());
      const Image distorted = read_png16(std::filesystem::path(montage_dir) /
                                         (id + "_distorted.png"));
      const Image recovered = read_png16(std::filesystem::path(montage_dir) /
                                         (id + "_recovered.png"));
      const int h = static_cast<int>(original.rows());
      const int w = static_cast<int>(original.cols());
      RgbImage canvas;
      canvas.height = h;
      canvas.width = w * 3 + 8;
      canvas.data.assign(static_cast<size_t>(canvas.height) * canvas.width * 3,
                         255);
      const auto blit = [&](const Image& img, int off) {
        for (int r = 0; r < h; ++r)
          for (int c = 0; c < w; ++c) {
            const auto v = static_cast<std::uint8_t>(
                std::lround(std::clamp(img(r, c), 0.0f, 1.0f) * 255.0f));
            canvas.set(r, off + c, v, v, v);
          }
      };
      blit(original, 0);
      blit(distorted, w + 4);
      blit(recovered, 2 * w + 8);
      write_png_rgb8(std::filesystem::path(out_dir) / ("montage_" + id + ".png"),
                     canvas);
      ++made;
    }
    std::cout << "wrote " << made << " montages to " << out_dir << "\n";
    if (in.empty()) return 0;
  }

  const json j = load_json_file(in);
  const std::string kind = j.value("kind", "");
  std::ostringstream csv;
  std::string out_name;
  if (kind == "ssl_eval") {
    out_name = "ssl_eval.csv";
    csv << "sample_id,ssim_dist,ssim_ssl,ssim_delta,psnr_dist,psnr_ssl,"
           "psnr_delta,cs_dist,cs_ssl,cs_delta\n";
    const auto emit = [&](const std::string& id, const json& row) {
      csv << id << "," << row["ssim"]["dist"] << "," << row["ssim"]["ssl"]
          << "," << row["ssim"]["delta"] << "," << row["psnr"]["dist"] << ","
          << row["psnr"]["ssl"] << "," << row["psnr"]["delta"] << ","
          << row["cs"]["dist"] << "," << row["cs"]["ssl"] << ","
          << row["cs"]["delta"] << "\n";
    };
    for (const auto& row : j.at("rows"))
      emit(row.at("sample_id").get<std::string>(), row);
    emit("MEAN", j.at("means"));
  } else if (kind == "seg_eval") {
    out_name = "seg_eval.csv";
    csv << "sample_id,tp,fp,fn,dice\n";
    for (const auto& row : j.at("rows"))
      csv << row["sample_id"].get<std::string>() << "," << row["tp"] << ","
          << row["fp"] << "," << row["fn"] << "," << row["dice"] << "\n";
    const auto& a = j.at("aggregate");
    csv << "AGGREGATE," << a["tp"] << "," << a["fp"] << "," << a["fn"] << ","
        << a["dice_macro"] << "\n";
  } else if (kind == "grid_report") {
    out_name = "grid_report.csv";
    csv << "arm,pretrain_size,label_size,cells_ok,dice_mean,dice_min,dice_max,"
           "recall_mean,precision_mean\n";
    for (const auto& s : j.at("summary")) {
      csv << s["arm"].get<std::string>() << "," << s["pretrain_size"] << ","
          << s["label_size"] << "," << s["cells_ok"];
      for (const char* key : {"dice_mean", "dice_min", "dice_max",
                              "recall_mean", "precision_mean"})
        csv << "," << (s.contains(key) ? s[key].dump() : "");
      csv << "\n";
    }
  } else {
    throw std::invalid_argument("report: unrecognized report kind in " + in);
  }
  write_text_atomic(std::filesystem::path(out_dir) / out_name, csv.str());
  std::cout << "wrote " << (std::filesystem::path(out_dir) / out_name).string()
            << "\n";
  return 0;
}

}  // namespace

std::vector<std::string> validate_config_file(const std::string& path) {
  std::vector<std::string> violations;
  json j;
  try {
    j = load_json_file(path);
  } catch (const std::exception& e) {
    return {std::string("unreadable or invalid JSON: ") + e.what()};
  }
  const auto check = [&](const char* what, auto&& fn) {
    try {
      fn();
    } catch (const std::exception& e) {
      const std::string msg = e.what();
      const std::string prefix = std::string(what) + ":";
      violations.push_back(msg.rfind(prefix, 0) == 0 ? msg
                                                     : prefix + " " + msg);
    }
  };
  if (j.contains("phase") || j.contains("steps") || j.contains("data")) {
    // train config: validate subsections independently so one bad field
    // does not hide another
    if (j.contains("net"))
      check("net", [&] { (void)NetConfig::from_json(j["net"]); });
    if (j.contains("distortion"))
      check("distortion",
            [&] { (void)DistortionConfig::from_json(j["distortion"]); });
    check("train", [&] {
      TrainConfig cfg = TrainConfig::from_json(j);
      if (cfg.out_dir.empty()) cfg.out_dir = ".";  // validate the rest
      if (cfg.data_root.empty()) cfg.data_root = ".";
      cfg.validate();
    });
  } else if (j.contains("grid") || j.contains("pretrain_sizes")) {
    const json& g = j.contains("grid") ? j["grid"] : j;
    check("grid", [&] { (void)ExperimentGrid::from_json(g); });
    if (j.contains("phantom"))
      check("phantom", [&] { (void)PhantomParams::from_json(j["phantom"]); });
    if (j.contains("train"))
      check("train", [&] {
        TrainConfig cfg = TrainConfig::from_json(j["train"]);
        if (cfg.out_dir.empty()) cfg.out_dir = ".";
        if (cfg.data_root.empty()) cfg.data_root = ".";
        cfg.validate();
      });
  } else if (j.contains("blob_count") || j.contains("image_size")) {
    check("phantom", [&] { (void)PhantomParams::from_json(j); });
  } else if (j.contains("count_range") || j.contains("size_range")) {
    check("distortion", [&] { (void)DistortionConfig::from_json(j); });
  } else if (j.contains("input_size") || j.contains("anchor_sides")) {
    check("net", [&] { (void)NetConfig::from_json(j); });
  } else {
    violations.push_back("unrecognized config type (no known keys found)");
  }
  return violations;
}

int run_cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  argv.push_back("sslseg");
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

int run_cli(int argc, const char* const* argv) {
  CLI::App app{
      "Distortion-based self-supervised pretraining for region-based "
      "segmentation, on synthetic phantoms"};
  app.require_subcommand(1);

  // gen-phantoms
  auto* gen = app.add_subcommand("gen-phantoms",
                                 "Generate a synthetic phantom corpus");
  int gen_n = 100;
  std::uint64_t gen_seed = 0;
  std::string gen_out, gen_params, gen_split = "0.8,0.1,0.1";
  bool gen_force = false;
  int gen_workers = 1;
  gen->add_option("--n", gen_n, "Number of phantoms");
  gen->add_option("--seed", gen_seed, "Global seed");
  gen->add_option("--out", gen_out, "Output dataset dir")->required();
  gen->add_option("--params", gen_params, "phantom.json params file");
  gen->add_option("--split", gen_split, "train,val,test ratios");
  gen->add_flag("--force", gen_force, "Overwrite a non-empty output dir");
  gen->add_option("--workers", gen_workers,
                  "Parallel workers (output is identical for any count)");

  // distort
  auto* dis = app.add_subcommand("distort",
                                 "Corrupt a corpus and emit pretext ground truth");
  std::string dis_in, dis_out, dis_cfg;
  std::uint64_t dis_seed = 0;
  bool dis_preview = false, dis_force = false;
  dis->add_option("--in", dis_in, "Input dataset dir")->required();
  dis->add_option("--out", dis_out, "Output dataset dir")->required();
  dis->add_option("--seed", dis_seed, "Seed");
  dis->add_option("--config", dis_cfg, "Distortion config JSON");
  dis->add_flag("--preview", dis_preview, "Write side-by-side preview PNGs");
  dis->add_flag("--force", dis_force, "Overwrite a non-empty output dir");

  // pretrain / finetune
  std::string tr_cfg, tr_out, tr_data;
  std::uint64_t tr_seed = 0;
  int tr_steps = -1;
  bool tr_deterministic = false;
  int tr_workers = 1;
  CLI::Option* pre_seed_opt = nullptr;
  CLI::Option* fine_seed_opt = nullptr;
  auto add_train_flags = [&](CLI::App* cmd) {
    cmd->add_option("--config", tr_cfg, "TrainConfig JSON")->required();
    auto* seed_opt = cmd->add_option("--seed", tr_seed, "Override seed");
    cmd->add_option("--out", tr_out, "Override output dir");
    cmd->add_option("--data", tr_data, "Override dataset dir");
    cmd->add_option("--steps", tr_steps, "Override step count");
    cmd->add_flag("--deterministic", tr_deterministic,
                  "Force the single-threaded data path (already the default)");
    cmd->add_option("--workers", tr_workers,
                    "Data workers (kept at 1: training is deterministic)");
    return seed_opt;
  };
  auto* pre = app.add_subcommand("pretrain", "SSL pretraining (pretext phase)");
  pre_seed_opt = add_train_flags(pre);
  auto* fine = app.add_subcommand("finetune", "Downstream fine-tuning");
  fine_seed_opt = add_train_flags(fine);

  // eval-ssl / eval-seg
  auto* essl = app.add_subcommand("eval-ssl", "Recovery-quality evaluation");
  std::string essl_ckpt, essl_data, essl_out = "ssl_eval.json", essl_cfg,
              essl_split = "test", essl_dump;
  std::uint64_t essl_seed = 0;
  essl->add_option("--ckpt", essl_ckpt, "Pretext checkpoint")->required();
  essl->add_option("--data", essl_data, "Dataset dir")->required();
  essl->add_option("--out", essl_out, "Output JSON path");
  essl->add_option("--config", essl_cfg, "Distortion config JSON");
  essl->add_option("--split", essl_split, "Dataset split");
  essl->add_option("--seed", essl_seed, "Distortion seed");
  essl->add_option("--dump-images", essl_dump, "Dump per-sample PNGs here");

  auto* eseg = app.add_subcommand("eval-seg", "Segmentation evaluation");
  std::string eseg_ckpt, eseg_data, eseg_out = "seg_eval.json",
              eseg_split = "test";
  eseg->add_option("--ckpt", eseg_ckpt, "Downstream checkpoint")->required();
  eseg->add_option("--data", eseg_data, "Dataset dir")->required();
  eseg->add_option("--out", eseg_out, "Output JSON path");
  eseg->add_option("--split", eseg_split, "Dataset split");

  // run-grid
  auto* grid_cmd = app.add_subcommand(
      "run-grid", "Pretrain-size x label-size x seed experiment matrix");
  std::string grid_cfg, grid_out;
  grid_cmd->add_option("--config", grid_cfg, "Grid config JSON")->required();
  grid_cmd->add_option("--out", grid_out, "Output dir")->required();

  // validate
  auto* val = app.add_subcommand("validate", "Check a config file");
  std::string val_cfg;
  val->add_option("--config", val_cfg, "Config JSON path")->required();

  // report
  auto* rep = app.add_subcommand("report", "Render JSON reports to CSV/PNG");
  std::string rep_in, rep_out = ".", rep_montage;
  rep->add_option("--in", rep_in, "Report JSON (ssl_eval/seg_eval/grid)");
  rep->add_option("--out-dir", rep_out, "Output directory");
  rep->add_option("--montage", rep_montage,
                  "eval-ssl --dump-images dir to render side-by-side PNGs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {  // --help
      std::cout << app.help();
      return 0;
    }
    std::cerr << app.help() << "\nerror: " << e.what() << "\n";
    return 1;
  }

  try {
    if (gen->parsed())
      return cmd_gen_phantoms(gen_n, gen_seed, gen_out, gen_params, gen_split,
                              gen_force, gen_workers);
    if (dis->parsed())
      return cmd_distort(dis_in, dis_out, dis_seed, dis_cfg, dis_preview,
                         dis_force);
    if (pre->parsed() || fine->parsed()) {
      Provenance prov;
      TrainConfig cfg = resolve_train_config(
          tr_cfg, pre->parsed() ? pre_seed_opt : fine_seed_opt, tr_seed,
          tr_out, tr_data, tr_steps, prov);
      if (tr_deterministic) prov.note("deterministic", "flag");
      cfg.validate();
      write_cli_config(cfg, prov);
      const TrainResult r = pre->parsed() ? pretrain(cfg) : finetune(cfg);
      std::cout << "steps=" << r.steps_run
                << " final=" << r.final_checkpoint.string() << " l_total="
                << r.last_report.l_total << "\n";
      return 0;
    }
    if (essl->parsed()) {
      SslEvalOptions opts;
      if (!essl_cfg.empty())
        opts.distortion = DistortionConfig::from_json(load_json_file(essl_cfg));
      opts.seed = essl_seed;
      opts.split = essl_split;
      if (!essl_dump.empty()) opts.dump_dir = essl_dump;
      const json report = evaluate_ssl(essl_ckpt, essl_data, opts, essl_out);
      std::cout << "mean psnr delta: "
                << report["means"]["psnr"]["delta"].get<double>() << " dB ("
                << essl_out << ")\n";
      return 0;
    }
    if (eseg->parsed()) {
      const json report = evaluate_seg(eseg_ckpt, eseg_data, eseg_split,
                                       eseg_out);
      std::cout << "dice_macro: "
                << report["aggregate"]["dice_macro"].get<double>() << " ("
                << eseg_out << ")\n";
      return 0;
    }
    if (grid_cmd->parsed()) {
      const json j = load_json_file(grid_cfg);
      check_json_keys(j, {"grid", "phantom", "train"}, "grid config file");
      const ExperimentGrid grid = ExperimentGrid::from_json(j.at("grid"));
      const PhantomParams phantom = PhantomParams::from_json(j.at("phantom"));
      TrainConfig base = TrainConfig::from_json(j.at("train"));
      if (base.data_root.empty()) base.data_root = "unused";
      if (base.out_dir.empty()) base.out_dir = grid_out;
      const json report = run_grid(grid, base, phantom, grid_out);
      std::cout << "grid report: " << (std::filesystem::path(grid_out) /
                                       "grid_report.json").string()
                << "\n";
      return 0;
    }
    if (val->parsed()) {
      const auto violations = validate_config_file(val_cfg);
      if (violations.empty()) {
        std::cout << "ok: no violations\n";
        return 0;
      }
      for (const auto& v : violations) std::cout << "violation: " << v << "\n";
      return 1;
    }
    if (rep->parsed()) return cmd_report(rep_in, rep_out, rep_montage);
  } catch (const std::invalid_argument& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  std::cerr << app.help();
  return 1;
}

}  // namespace sslseg
