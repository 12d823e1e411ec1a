#pragma once

#include "pairdiff/adversarial.hpp"
#include "pairdiff/generator.hpp"
#include "pairdiff/segmentation.hpp"
#include "pairdiff/super_resolution.hpp"
#include "pairdiff/training.hpp"
#include "pairdiff/weight_selection.hpp"

#include <json.hpp>

#include <filesystem>
#include <stdexcept>
#include <string>

namespace pairdiff {

/// Invalid configuration; the message starts with the offending field path.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct DataConfig {
  /// Directory in the load_dataset layout; empty selects the toy generator.
  std::string root;
  int toy_count = 500;
  int toy_size = 32;
  std::uint64_t toy_seed = 7;
  /// Held-out real pairs for downstream evaluation; empty selects a toy set.
  std::string eval_root;
  int eval_toy_count = 200;
  std::uint64_t eval_toy_seed = 99;
  /// Tile size for prepare_eval_crops on eval_root sources (0 = use as is).
  int eval_crop = 0;
};

struct SamplingConfig {
  SamplerOptions sampler{SamplerMode::kDdpm, 100, PosteriorVariance::kBeta, true};
  int count = 500;
  SelectionStrategy selection = SelectionStrategy::kMinMeanJsd;
  int score_samples = 64;
  SamplerOptions score_sampler{SamplerMode::kDdim, 100, PosteriorVariance::kBeta, true};
  int histogram_bins = 256;
};

struct ExperimentConfig {
  std::string name = "experiment";
  std::uint64_t seed = 0;
  std::string output_root = "runs";
  DataConfig data;
  PairedGeneratorConfig generator;
  TrainConfig train;
  DiscriminatorSchedule discriminator;
  SRConfig sr;
  TrainConfig sr_train;
  SegConfig segmentation;
  SamplingConfig sampling;

  /// Sets the master seed and the per-stage seeds derived from it.
  void apply_seed(std::uint64_t value);
  /// Cross-field checks; throws ConfigError.
  void validate() const;
  /// Canonical JSON with every field present.
  nlohmann::json to_json() const;
  /// 16 hex digits of FNV-1a over the canonical JSON.
  std::string hash() const;
};

/// Parses a JSON document over the base named by the optional "preset" key
/// ("toy" by default, or "full"). Missing fields keep the preset's values;
/// unknown fields and type mismatches raise ConfigError naming the field path.
ExperimentConfig config_from_json(const nlohmann::json& j);
ExperimentConfig load_config(const std::filesystem::path& path);

/// Small settings that finish on one CPU core in minutes: 16x16 pairs from a
/// 32x32 toy corpus, 32x32 super-resolution.
ExperimentConfig toy_config();

/// Full-size settings: 512 crops resized to 128 for generation, 128 -> 256
/// super-resolution, batch 64 for 1500 epochs. Expects data.root to be set.
ExperimentConfig full_config();

}  // namespace pairdiff
