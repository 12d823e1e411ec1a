#pragma once

#include "pairdiff/training.hpp"

#include <array>
#include <string>
#include <vector>

namespace pairdiff {

struct RGBHistogram {
  int bins = 256;
  std::array<std::vector<double>, 3> per_channel;
};

/// Per-channel normalized histogram over every pixel of every image. Bin b
/// covers [b / bins, (b + 1) / bins); the last bin also takes 1.0.
RGBHistogram rgb_histogram(const std::vector<Image>& images, int bins = 256);

/// Jensen-Shannon divergence with the natural log, so the range is [0, ln 2].
double js_divergence(const std::vector<double>& p, const std::vector<double>& q);

/// Mean of the three per-channel divergences.
double mean_js_divergence(const RGBHistogram& a, const RGBHistogram& b);

/// Generates n_samples pairs and compares their RGB histogram with `train`.
double score_generator(const PairedGenerator<float>& model, const NoiseSchedule& sched, const RGBHistogram& train,
                       int n_samples, const SamplerOptions& options, std::uint64_t seed);

/// Loads the checkpoint weights into a generator built from `config`, scores
/// it, and stores the result as mean_jsd in the checkpoint manifest.
double score_checkpoint(CheckpointRecord& record, const PairedGeneratorConfig& config, const RGBHistogram& train,
                        int n_samples, const SamplerOptions& options, std::uint64_t seed);

enum class SelectionStrategy { kBestValLoss, kFinalEpoch, kMinMeanJsd };
SelectionStrategy parse_selection_strategy(const std::string& text);
std::string to_string(SelectionStrategy s);

/// argmin val_loss, max epoch, or argmin mean_jsd; ties go to the earliest
/// epoch. Throws on an empty list or a record missing the needed metric.
const CheckpointRecord& select_weights(const std::vector<CheckpointRecord>& records, SelectionStrategy strategy);

}  // namespace pairdiff
