#pragma once

#include "pairdiff/adversarial.hpp"
#include "pairdiff/dataset.hpp"
#include "pairdiff/diffusion.hpp"
#include "pairdiff/generator.hpp"
#include "pairdiff/super_resolution.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

namespace pairdiff {

struct TrainConfig {
  int batch_size = 64;
  double lr = 2.1e-4;
  int epochs = 1500;
  int T = 1000;
  double adv_weight = 0.25;
  bool use_discriminator = false;
  int crop_size = 512;
  int train_size = 128;
  double split_ratio = 0.8;
  std::uint64_t seed = 0;
  /// 0 means ceil(train split size / batch_size). Batches are drawn with
  /// replacement, so an epoch is a step count rather than a full pass.
  int steps_per_epoch = 0;
  /// Global gradient-norm clip; 0 disables.
  double clip_norm = 0.0;
  /// Fraction of the epochs between checkpoints; the final epoch is always saved.
  double checkpoint_fraction = 0.05;

  void validate() const;
  int resolved_steps_per_epoch(std::size_t n_train) const;
  /// Epochs at which a checkpoint is written, ascending.
  std::vector<int> checkpoint_epochs() const;
};

struct CheckpointRecord {
  int epoch = 0;
  /// Checkpoint directory holding weights.bin and manifest.json.
  std::filesystem::path weights_uri;
  double val_loss = 0.0;
  std::optional<double> mean_jsd;
  std::string rng_state;
  std::int64_t step = 0;
  std::string config_hash;
};

/// Manifest I/O; the manifest is readable without touching the weights.
CheckpointRecord read_checkpoint(const std::filesystem::path& ckpt_dir);
void write_checkpoint_manifest(const CheckpointRecord& record);
/// All `ckpt_<epoch>` directories of a run, by ascending epoch.
std::vector<CheckpointRecord> list_checkpoints(const std::filesystem::path& run_dir);

struct EpochLog {
  int epoch = 0;
  double train_mse = 0;
  double val_mse = 0;
  double loss_d = 0;
  double loss_g_adv = 0;
};

struct StepInfo {
  std::int64_t step = 0;
  int epoch = 0;
  double mse = 0;
  double loss_d = 0;
  double loss_g_adv = 0;
  double total = 0;
};

struct TrainOptions {
  /// Where checkpoints and train_log.csv go; empty keeps everything in memory.
  std::filesystem::path run_dir;
  /// Continue from the latest checkpoint in run_dir if there is one.
  bool resume = false;
  std::string config_hash;
  std::function<void(const StepInfo&)> on_step;
};

struct TrainResult {
  std::vector<CheckpointRecord> checkpoints;
  std::vector<EpochLog> log;
  std::int64_t steps = 0;
};

/// Noise-prediction MSE over both branches jointly, with Adam. With
/// use_discriminator, each step first updates a time-conditioned
/// discriminator on (real x_{t-1}, detached generated x_{t-1}) and then adds
/// adv_weight times the generator adversarial loss. The dataset is split with
/// split_ratio; validation MSE uses a fixed noise stream every epoch.
TrainResult train_paired(PairedGenerator<float>& model, const std::vector<ImageMaskPair>& dataset,
                         const TrainConfig& train, const DiscriminatorSchedule& disc_schedule = {},
                         const TrainOptions& options = {});

/// Same loop for the super-resolution model. Ground truth is the augmented
/// pair at high_size; conditioning is that pair downsampled to low_size.
TrainResult train_sr(SRModel<float>& model, const std::vector<ImageMaskPair>& dataset, const TrainConfig& train,
                     const TrainOptions& options = {});

/// Validation crop: centre crop of crop_size (when the source is larger)
/// resized to out_size.
ImageMaskPair center_view(const ImageMaskPair& pair, int crop_size, int out_size);

/// Draws n pairs from the generator, `chunk` at a time, each chunk seeded
/// from `seed` and its offset.
std::vector<ImageMaskPair> generate_pairs(const PairedGenerator<float>& model, const NoiseSchedule& sched, int n,
                                          const SamplerOptions& options, std::uint64_t seed, int chunk = 64);

void write_train_log(const std::filesystem::path& path, const std::vector<EpochLog>& log);
std::vector<EpochLog> read_train_log(const std::filesystem::path& path);

}  // namespace pairdiff
