#include "commands.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace pairdiff::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::uint64_t kGeneratorInitSalt = 1;
constexpr std::uint64_t kSrInitSalt = 2;
constexpr std::uint64_t kScoreSalt = 5;
constexpr std::uint64_t kSampleSalt = 6;
constexpr std::uint64_t kSuperresSalt = 7;
constexpr std::uint64_t kSegSalt = 9;

fs::path run_root(const ExperimentConfig& cfg) { return fs::path(cfg.output_root) / cfg.name; }

std::string flavor_name(const ExperimentConfig& cfg) {
  return to_string(cfg.generator.variant) + (cfg.train.use_discriminator ? "_gan" : "");
}

std::optional<json> read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) return std::nullopt;
  try {
    json j;
    in >> j;
    return j;
  } catch (const json::exception&) {
    return std::nullopt;
  }
}

json require_json(const fs::path& path) {
  auto j = read_json(path);
  if (!j) throw std::runtime_error("missing or unreadable " + path.string());
  return *j;
}

SamplerMode parse_mode_flag(const std::string& text) {
  try {
    return parse_sampler_mode(text);
  } catch (const std::invalid_argument& e) {
    throw UsageError(std::string("--mode: ") + e.what());
  }
}

SelectionStrategy parse_strategy_flag(const std::string& text) {
  try {
    return parse_selection_strategy(text);
  } catch (const std::invalid_argument& e) {
    throw UsageError(std::string("--strategy: ") + e.what());
  }
}

struct Run {
  ExperimentConfig cfg;
  std::string kind;
  fs::path dir;
};

Run open_run(const fs::path& dir) {
  const json j = require_json(dir / "run.json");
  Run run{config_from_json(j.at("config")), j.at("kind").get<std::string>(), dir};
  return run;
}

std::vector<ImageMaskPair> training_split(const ExperimentConfig& cfg, int size) {
  auto data = load_training_data(cfg);
  auto [train, val] = split_dataset(data, cfg.train.split_ratio, cfg.train.seed);
  for (auto& p : train) p = center_view(p, cfg.train.crop_size, size);
  return train;
}

RGBHistogram training_histogram(const ExperimentConfig& cfg) {
  std::vector<Image> images;
  for (const auto& p : training_split(cfg, cfg.generator.input_size)) images.push_back(p.image);
  return rgb_histogram(images, cfg.sampling.histogram_bins);
}

const CheckpointRecord& choose_checkpoint(const Run& run, std::vector<CheckpointRecord>& records,
                                          SelectionStrategy strategy, std::ostream& log) {
  if (records.empty()) throw std::runtime_error("no checkpoints in " + run.dir.string());
  if (strategy == SelectionStrategy::kMinMeanJsd) {
    if (run.kind != "generator") throw UsageError("min_mean_jsd applies to generator runs only");
    std::optional<RGBHistogram> hist;
    for (auto& r : records) {
      if (r.mean_jsd) continue;
      if (!hist) hist = training_histogram(run.cfg);
      const double s = score_checkpoint(r, run.cfg.generator, *hist, run.cfg.sampling.score_samples,
                                        run.cfg.sampling.score_sampler, derive_seed(run.cfg.seed, kScoreSalt));
      log << "scored epoch " << r.epoch << ": mean_jsd " << s << "\n";
    }
  }
  return select_weights(records, strategy);
}

void write_json_atomic(const fs::path& path, const json& j) { write_file_atomic(path, j.dump(2)); }

bool manifest_matches(const fs::path& manifest, const json& expected) {
  auto j = read_json(manifest);
  if (!j) return false;
  for (const auto& [key, value] : expected.items())
    if (!j->contains(key) || (*j)[key] != value) return false;
  return true;
}

/// Adds fields beyond ExportInfo to an exported manifest, keeping the write atomic.
void extend_manifest(const fs::path& manifest, const json& extra) {
  json j = require_json(manifest);
  for (const auto& [key, value] : extra.items()) j[key] = value;
  write_json_atomic(manifest, j);
}

void save_segmenter(const SegModel<float>& model, const fs::path& dir, const json& meta) {
  fs::create_directories(dir);
  model.params().save(dir / "seg.bin.tmp");
  fs::rename(dir / "seg.bin.tmp", dir / "seg.bin");
  json j = meta;
  j["encoder_widths"] = model.config().encoder_widths;
  j["image_channels"] = model.config().image_channels;
  write_json_atomic(dir / "seg.json", j);
}

SegModel<float> load_segmenter(const fs::path& dir, const ExperimentConfig& cfg, json* meta = nullptr) {
  const json j = require_json(dir / "seg.json");
  SegConfig sc = cfg.segmentation;
  sc.encoder_widths = j.at("encoder_widths").get<std::vector<int>>();
  sc.image_channels = j.at("image_channels").get<int>();
  SegModel<float> model(sc, 0);
  model.params().load(dir / "seg.bin");
  if (meta) *meta = j;
  return model;
}

std::vector<ImageMaskPair> load_dir(const fs::path& dir, std::ostream& log) {
  auto result = load_dataset(dir);
  for (const auto& w : result.warnings) log << "warning: " << w << "\n";
  if (!result.unmatched.empty()) log << "warning: " << result.unmatched.size() << " unmatched file(s) in " << dir << "\n";
  if (result.pairs.empty()) throw std::runtime_error("no image-mask pairs in " + dir.string());
  return result.pairs;
}

}  // namespace

std::vector<ImageMaskPair> load_training_data(const ExperimentConfig& cfg) {
  if (cfg.data.root.empty()) return make_toy_dataset(cfg.data.toy_count, cfg.data.toy_size, cfg.data.toy_seed);
  auto result = load_dataset(cfg.data.root);
  if (result.pairs.empty()) throw std::runtime_error("no image-mask pairs under " + cfg.data.root);
  return result.pairs;
}

std::vector<ImageMaskPair> load_eval_data(const ExperimentConfig& cfg, int size) {
  std::vector<ImageMaskPair> out;
  if (cfg.data.eval_root.empty()) {
    for (const auto& p : make_toy_dataset(cfg.data.eval_toy_count, cfg.data.toy_size, cfg.data.eval_toy_seed))
      out.push_back(center_view(p, p.height(), size));
    return out;
  }
  auto result = load_dataset(cfg.data.eval_root);
  if (result.pairs.empty()) throw std::runtime_error("no image-mask pairs under " + cfg.data.eval_root);
  if (cfg.data.eval_crop > 0) return prepare_eval_crops(result.pairs, cfg.data.eval_crop, size);
  for (const auto& p : result.pairs) out.push_back(resize_pair(p, size, size));
  return out;
}

Image contact_sheet(const std::vector<ImageMaskPair>& pairs, int count) {
  if (pairs.empty()) throw std::invalid_argument("contact_sheet: no pairs");
  const int cols = std::max(1, std::min(count, int(pairs.size())));
  const int h = pairs.front().height(), w = pairs.front().width();
  Image sheet(Shape{1, 3 * h, cols * w, 3});
  for (int i = 0; i < cols; ++i) {
    const auto& p = pairs[std::size_t(i)];
    if (p.height() != h || p.width() != w) throw ShapeError("contact_sheet: pairs differ in size");
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        const float m = p.mask(0, y, x, 0);
        for (int c = 0; c < 3; ++c) {
          const float v = p.image(0, y, x, p.image.c() == 3 ? c : 0);
          const float tint = c == 0 ? 1.0f : 0.0f;
          sheet(0, y, i * w + x, c) = v;
          sheet(0, h + y, i * w + x, c) = m;
          sheet(0, 2 * h + y, i * w + x, c) = m >= 0.5f ? 0.5f * v + 0.5f * tint : v;
        }
      }
  }
  return sheet;
}

fs::path cmd_train(const ExperimentConfig& base, const TrainArgs& args, std::ostream& log) {
  ExperimentConfig cfg = base;
  if (args.model != "generator" && args.model != "sr") throw UsageError("--model must be generator or sr");
  const bool is_sr = args.model == "sr";
  if (args.flavor) {
    try {
      cfg.generator.variant = parse_variant(*args.flavor);
    } catch (const std::invalid_argument& e) {
      throw UsageError(std::string("--flavor: ") + e.what());
    }
  }
  if (args.discriminator) cfg.train.use_discriminator = true;
  cfg.validate();
  const std::string hash = cfg.hash();
  const fs::path dir = run_root(cfg) / (is_sr ? std::string("sr") : flavor_name(cfg));
  const TrainConfig& tc = is_sr ? cfg.sr_train : cfg.train;

  if (auto existing = read_json(dir / "run.json")) {
    const auto records = list_checkpoints(dir);
    if (existing->value("config_hash", "") == hash && !records.empty() && records.back().epoch == tc.epochs) {
      log << "train: " << dir.string() << " already complete, skipping\n";
      return dir;
    }
    if (!args.resume || existing->value("config_hash", "") != hash)
      for (const auto& r : records) fs::remove_all(r.weights_uri);
  }
  fs::create_directories(dir);
  write_json_atomic(dir / "run.json", {{"kind", is_sr ? "sr" : "generator"},
                                       {"flavor", is_sr ? "sr" : flavor_name(cfg)},
                                       {"config_hash", hash},
                                       {"config", cfg.to_json()}});
  const auto data = load_training_data(cfg);
  log << "train: " << data.size() << " pairs, " << tc.epochs << " epochs, run " << dir.string() << "\n";

  TrainOptions options;
  options.run_dir = dir;
  options.resume = args.resume;
  options.config_hash = hash;
  const auto started = std::chrono::steady_clock::now();
  options.on_step = [&](const StepInfo& s) {
    if (s.step % 100 == 0) {
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
      log << "  step " << s.step << " epoch " << s.epoch << " mse " << s.mse;
      if (tc.use_discriminator) log << " loss_d " << s.loss_d << " adv " << s.loss_g_adv;
      log << " (" << std::fixed << std::setprecision(1) << secs << "s)" << std::defaultfloat << std::setprecision(6)
          << "\n";
    }
  };
  TrainResult result;
  if (is_sr) {
    SRModel<float> model(cfg.sr, derive_seed(cfg.seed, kSrInitSalt));
    result = train_sr(model, data, cfg.sr_train, options);
  } else {
    PairedGenerator<float> model(cfg.generator, derive_seed(cfg.seed, kGeneratorInitSalt));
    DiscriminatorSchedule sched = cfg.discriminator;
    sched.T = cfg.train.T;
    result = train_paired(model, data, cfg.train, sched, options);
  }
  if (!result.log.empty())
    log << "train: done after " << result.steps << " steps; train_mse " << result.log.front().train_mse << " -> "
        << result.log.back().train_mse << ", val_mse " << result.log.back().val_mse << ", "
        << result.checkpoints.size() << " checkpoints\n";
  return dir;
}

fs::path cmd_select(const ExperimentConfig&, const SelectArgs& args, std::ostream& log) {
  const SelectionStrategy strategy = parse_strategy_flag(args.strategy);
  Run run = open_run(args.run);
  auto records = list_checkpoints(run.dir);
  const CheckpointRecord& chosen = choose_checkpoint(run, records, strategy, log);
  log << std::left << std::setw(8) << "epoch" << std::setw(14) << "val_loss" << "mean_jsd\n";
  for (const auto& r : records) {
    log << std::setw(8) << r.epoch << std::setw(14) << r.val_loss;
    if (r.mean_jsd) log << *r.mean_jsd; else log << "-";
    log << (r.epoch == chosen.epoch ? "  <- selected" : "") << "\n";
  }
  log << "selected (" << to_string(strategy) << "): " << chosen.weights_uri.string() << "\n";
  write_json_atomic(run.dir / "selection.json",
                    {{"strategy", to_string(strategy)}, {"epoch", chosen.epoch}, {"checkpoint", chosen.weights_uri.string()}});
  return chosen.weights_uri;
}

fs::path cmd_sample(const ExperimentConfig&, const SampleArgs& args, std::ostream& log) {
  if (args.n < 1) throw UsageError("--n must be >= 1");
  Run run = open_run(args.run);
  if (run.kind != "generator") throw UsageError("--run must point at a generator run");
  SamplerOptions sampler = run.cfg.sampling.sampler;
  if (args.mode) sampler.mode = parse_mode_flag(*args.mode);
  if (args.steps) sampler.steps = *args.steps;
  if (sampler.steps < 1 || sampler.steps > run.cfg.generator.timesteps)
    throw UsageError("--steps must lie in [1, " + std::to_string(run.cfg.generator.timesteps) + "]");
  auto records = list_checkpoints(run.dir);
  const CheckpointRecord ckpt = choose_checkpoint(run, records, parse_strategy_flag(args.strategy), log);
  const std::uint64_t seed = derive_seed(run.cfg.seed, kSampleSalt);
  const json expected = {{"checkpoint", ckpt.weights_uri.string()}, {"sampler_mode", to_string(sampler.mode)},
                         {"sampler_steps", sampler.steps},         {"seed", seed},
                         {"config_hash", run.cfg.hash()},           {"count", args.n}};
  const fs::path manifest = args.dest / "manifest.json";
  if (manifest_matches(manifest, expected)) {
    log << "sample: " << args.dest.string() << " already holds these samples, skipping\n";
  } else {
    PairedGenerator<float> model(run.cfg.generator, 0);
    model.params().load(ckpt.weights_uri / "weights.bin");
    const auto pairs =
        generate_pairs(model, make_linear_schedule(run.cfg.generator.timesteps), args.n, sampler, seed);
    export_generated(pairs, args.dest, {ckpt.weights_uri.string(), to_string(sampler.mode), sampler.steps, seed,
                                        run.cfg.hash()});
    extend_manifest(manifest, {{"checkpoint_epoch", ckpt.epoch}, {"clip_x0", sampler.clip_x0}});
    log << "sample: wrote " << pairs.size() << " pairs to " << args.dest.string() << "\n";
  }
  if (args.grid) {
    const auto pairs = load_dir(args.dest, log);
    write_png(args.dest / "contact_sheet.png", contact_sheet(pairs, 8));
  }
  return manifest;
}

fs::path cmd_superres(const ExperimentConfig&, const SuperresArgs& args, std::ostream& log) {
  Run run = open_run(args.run);
  if (run.kind != "sr") throw UsageError("--run must point at a super-resolution run");
  SamplerOptions sampler;
  sampler.mode = args.mode ? parse_mode_flag(*args.mode) : run.cfg.sr.infer_mode;
  sampler.steps = args.steps.value_or(run.cfg.sr.steps_infer);
  if (sampler.steps < 1 || sampler.steps > run.cfg.sr.steps_train)
    throw UsageError("--steps must lie in [1, " + std::to_string(run.cfg.sr.steps_train) + "]");
  auto records = list_checkpoints(run.dir);
  if (records.empty()) throw std::runtime_error("no checkpoints in " + run.dir.string());
  const CheckpointRecord ckpt = select_weights(records, SelectionStrategy::kFinalEpoch);
  const std::uint64_t seed = derive_seed(run.cfg.seed, kSuperresSalt);
  const auto input_manifest = read_json(args.input / "manifest.json");
  const json expected = {{"checkpoint", ckpt.weights_uri.string()}, {"sampler_mode", to_string(sampler.mode)},
                         {"sampler_steps", sampler.steps}, {"seed", seed}, {"config_hash", run.cfg.hash()},
                         {"source", fs::absolute(args.input).string()},
                         {"source_manifest", input_manifest ? input_manifest->dump() : std::string()}};
  const fs::path manifest = args.dest / "manifest.json";
  if (manifest_matches(manifest, expected)) {
    log << "superres: " << args.dest.string() << " is up to date, skipping\n";
    return manifest;
  }
  const auto low = load_dir(args.input, log);
  SRModel<float> model(run.cfg.sr, 0);
  model.params().load(ckpt.weights_uri / "weights.bin");
  const auto started = std::chrono::steady_clock::now();
  const auto high = super_resolve(model, make_linear_schedule(run.cfg.sr.steps_train), low, sampler, seed);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  export_generated(high, args.dest, {ckpt.weights_uri.string(), to_string(sampler.mode), sampler.steps, seed,
                                     run.cfg.hash()});
  extend_manifest(manifest, {{"source", expected["source"]}, {"source_manifest", expected["source_manifest"]},
                             {"seconds", secs}});
  log << "superres: " << high.size() << " pairs " << run.cfg.sr.low_size << " -> " << run.cfg.sr.high_size << " in "
      << secs << "s, written to " << args.dest.string() << "\n";
  return manifest;
}

fs::path cmd_segtrain(const ExperimentConfig& cfg, const SegTrainArgs& args, std::ostream& log) {
  const json expected = {{"config_hash", cfg.hash()},
                         {"train_dir", fs::absolute(args.train).string()},
                         {"init", args.init ? fs::absolute(*args.init).string() : std::string()}};
  if (manifest_matches(args.dest / "seg.json", expected) && fs::exists(args.dest / "seg.bin")) {
    log << "segtrain: " << args.dest.string() << " already trained, skipping\n";
    return args.dest;
  }
  const auto pairs = load_dir(args.train, log);
  const std::uint64_t seed = derive_seed(cfg.seed, kSegSalt);
  const auto started = std::chrono::steady_clock::now();
  SegModel<float> model = args.init ? finetune(load_segmenter(*args.init, cfg), pairs, cfg.segmentation, seed)
                                    : train_segmenter(pairs, cfg.segmentation, seed);
  json meta = expected;
  meta["input_size"] = pairs.front().height();
  meta["epochs"] = cfg.segmentation.epochs;
  save_segmenter(model, args.dest, meta);
  log << "segtrain: " << pairs.size() << " pairs, " << cfg.segmentation.epochs << " epochs in "
      << std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count() << "s -> "
      << args.dest.string() << "\n";
  return args.dest;
}

fs::path cmd_segeval(const ExperimentConfig& cfg, const SegEvalArgs& args, std::ostream& log) {
  if (!(args.threshold >= 0 && args.threshold <= 1)) throw UsageError("--threshold must lie in [0, 1]");
  json meta;
  const SegModel<float> model = load_segmenter(args.model, cfg, &meta);
  const int size = meta.at("input_size").get<int>();
  const auto test = args.test ? load_dir(*args.test, log) : load_eval_data(cfg, size);
  const SegMetrics m = evaluate(model, test, args.threshold);
  log << "segeval: " << test.size() << " pairs; dice " << m.dice << " iou " << m.iou << " (per-image mean dice "
      << m.mean_dice << ", iou " << m.mean_iou << ")\n";
  const fs::path csv = args.csv.value_or(args.model / "metrics.csv");
  std::string content;
  if (std::ifstream in(csv); in) {
    std::ostringstream ss;
    ss << in.rdbuf();
    content = ss.str();
  }
  if (content.empty()) content = "method,phase,dice,iou\n";
  std::ostringstream row;
  row.precision(6);
  row << args.method << ',' << args.phase << ',' << std::fixed << m.dice << ',' << m.iou << '\n';
  content += row.str();
  if (!csv.parent_path().empty()) fs::create_directories(csv.parent_path());
  write_file_atomic(csv, content);
  return csv;
}

fs::path cmd_pipeline(const ExperimentConfig& cfg, std::ostream& log) {
  cfg.validate();
  const std::string hash = cfg.hash();
  const fs::path root = run_root(cfg) / "pipeline";
  const fs::path stages = root / "stages";
  fs::create_directories(stages);
  const fs::path metrics = root / "metrics.csv";
  const std::string method = to_string(cfg.generator.variant);

  auto stage = [&](const std::string& name, const std::function<fs::path()>& body) {
    const fs::path marker = stages / (name + ".json");
    if (manifest_matches(marker, {{"stage", name}, {"config_hash", hash}})) {
      log << "[" << name << "] complete, skipping\n";
      return fs::path(require_json(marker).at("artifact").get<std::string>());
    }
    log << "[" << name << "] running\n";
    const auto started = std::chrono::steady_clock::now();
    fs::path artifact;
    try {
      artifact = body();
    } catch (const std::exception& e) {
      throw std::runtime_error("pipeline stage '" + name + "' failed: " + e.what() + " (artifacts under " +
                               root.string() + ")");
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    write_json_atomic(marker, {{"stage", name}, {"config_hash", hash}, {"artifact", artifact.string()},
                               {"seconds", secs}});
    return artifact;
  };

  if (!fs::exists(stages / "segeval.json") && fs::exists(metrics)) fs::remove(metrics);

  const fs::path gen_run = stage("train", [&] { return cmd_train(cfg, TrainArgs{std::nullopt, false, true, "generator"}, log); });
  stage("select", [&] { return cmd_select(cfg, SelectArgs{gen_run, to_string(cfg.sampling.selection)}, log); });
  const fs::path generated = root / "generated";
  stage("sample", [&] {
    SampleArgs a;
    a.run = gen_run;
    a.dest = generated;
    a.n = cfg.sampling.count;
    a.mode = to_string(cfg.sampling.sampler.mode);
    a.steps = cfg.sampling.sampler.steps;
    a.strategy = to_string(cfg.sampling.selection);
    a.grid = true;
    return cmd_sample(cfg, a, log);
  });
  const fs::path sr_run = stage("train_sr", [&] { return cmd_train(cfg, TrainArgs{std::nullopt, false, true, "sr"}, log); });
  const fs::path generated_sr = root / "generated_sr";
  stage("superres", [&] { return cmd_superres(cfg, SuperresArgs{sr_run, generated, generated_sr, std::nullopt, std::nullopt}, log); });
  const fs::path seg_synth = root / "seg_synthetic";
  stage("segtrain", [&] { return cmd_segtrain(cfg, SegTrainArgs{generated_sr, seg_synth, std::nullopt}, log); });
  stage("segeval", [&] {
    return cmd_segeval(cfg, SegEvalArgs{seg_synth, std::nullopt, 0.5, method, "synthetic", metrics}, log);
  });
  const fs::path real_train = root / "real_train";
  stage("export_real", [&] {
    return export_generated(training_split(cfg, cfg.sr.high_size), real_train, {"", "real", 0, cfg.seed, hash});
  });
  const fs::path seg_ft = root / "seg_finetuned";
  stage("finetune", [&] { return cmd_segtrain(cfg, SegTrainArgs{real_train, seg_ft, seg_synth}, log); });
  stage("segeval_finetuned", [&] {
    return cmd_segeval(cfg, SegEvalArgs{seg_ft, std::nullopt, 0.5, method, "finetuned", metrics}, log);
  });
  log << "pipeline: metrics in " << metrics.string() << "\n";
  return metrics;
}

fs::path cmd_report(const ExperimentConfig&, const ReportArgs& args, std::ostream& log) {
  if (args.count < 1) throw UsageError("--count must be >= 1");
  const auto pairs = load_dir(args.input, log);
  if (!args.dest.parent_path().empty()) fs::create_directories(args.dest.parent_path());
  write_png(args.dest, contact_sheet(pairs, args.count));
  log << "report: contact sheet of " << std::min<std::size_t>(pairs.size(), std::size_t(args.count)) << " pairs -> "
      << args.dest.string() << "\n";
  if (args.metrics) {
    std::ifstream in(*args.metrics);
    if (!in) throw std::runtime_error("cannot read " + args.metrics->string());
    std::string line;
    while (std::getline(in, line)) {
      std::istringstream ls(line);
      std::string cell;
      while (std::getline(ls, cell, ',')) log << std::left << std::setw(16) << cell;
      log << "\n";
    }
  }
  return args.dest;
}

}  // namespace pairdiff::cli
