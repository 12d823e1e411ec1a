#pragma once

#include "pairdiff/config.hpp"

#include <filesystem>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>

namespace pairdiff::cli {

/// Bad flags or arguments; mapped to exit code 2 like ConfigError.
class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TrainArgs {
  std::optional<std::string> flavor;
  bool discriminator = false;
  bool resume = false;
  /// "generator" or "sr".
  std::string model = "generator";
};

struct SelectArgs {
  std::filesystem::path run;
  std::string strategy = "min_mean_jsd";
};

struct SampleArgs {
  std::filesystem::path run;
  std::filesystem::path dest;
  int n = 8;
  std::optional<std::string> mode;
  std::optional<int> steps;
  std::string strategy = "final_epoch";
  bool grid = false;
};

struct SuperresArgs {
  std::filesystem::path run;
  std::filesystem::path input;
  std::filesystem::path dest;
  std::optional<std::string> mode;
  std::optional<int> steps;
};

struct SegTrainArgs {
  std::filesystem::path train;
  std::filesystem::path dest;
  std::optional<std::filesystem::path> init;
};

struct SegEvalArgs {
  std::filesystem::path model;
  std::optional<std::filesystem::path> test;
  double threshold = 0.5;
  std::string method = "model";
  std::string phase = "synthetic";
  std::optional<std::filesystem::path> csv;
};

struct ReportArgs {
  std::filesystem::path input;
  std::filesystem::path dest;
  int count = 8;
  std::optional<std::filesystem::path> metrics;
};

/// Every command writes progress to `log` and returns the main artifact path.
std::filesystem::path cmd_train(const ExperimentConfig& cfg, const TrainArgs& args, std::ostream& log);
std::filesystem::path cmd_select(const ExperimentConfig& cfg, const SelectArgs& args, std::ostream& log);
std::filesystem::path cmd_sample(const ExperimentConfig& cfg, const SampleArgs& args, std::ostream& log);
std::filesystem::path cmd_superres(const ExperimentConfig& cfg, const SuperresArgs& args, std::ostream& log);
std::filesystem::path cmd_segtrain(const ExperimentConfig& cfg, const SegTrainArgs& args, std::ostream& log);
std::filesystem::path cmd_segeval(const ExperimentConfig& cfg, const SegEvalArgs& args, std::ostream& log);
std::filesystem::path cmd_pipeline(const ExperimentConfig& cfg, std::ostream& log);
std::filesystem::path cmd_report(const ExperimentConfig& cfg, const ReportArgs& args, std::ostream& log);

/// Real training pairs named by the config (directory or toy corpus).
std::vector<ImageMaskPair> load_training_data(const ExperimentConfig& cfg);
/// Held-out real pairs at `size` for downstream evaluation.
std::vector<ImageMaskPair> load_eval_data(const ExperimentConfig& cfg, int size);

/// Three rows per column: image, mask, and the image with the mask tinted red.
Image contact_sheet(const std::vector<ImageMaskPair>& pairs, int count);

}  // namespace pairdiff::cli
