#pragma once

#include "pairdiff/dataset.hpp"
#include "pairdiff/layers.hpp"

#include <cstdint>
#include <filesystem>
#include <vector>

namespace pairdiff {

struct SegConfig {
  std::vector<int> encoder_widths{16, 32, 64, 128};
  double lr = 0.01;
  double momentum = 0.0;
  int epochs = 50;
  int batch_size = 16;
  double dice_weight = 1.0;
  double bce_weight = 1.0;
  int image_channels = 3;

  void validate() const;
};

struct ImageScore {
  double dice = 0;
  double iou = 0;
};

struct SegMetrics {
  /// Headline numbers from confusion counts summed over the whole test set.
  double dice = 0;
  double iou = 0;
  /// Means of the per-image scores.
  double mean_dice = 0;
  double mean_iou = 0;
  std::vector<ImageScore> per_image;
};

/// 2|A n B| / (|A| + |B|) on binary masks; 1 when both are empty.
double dice_score(const Image& pred, const Image& gt);
/// |A n B| / |A u B| on binary masks; 1 when both are empty.
double iou_score(const Image& pred, const Image& gt);

/// Scores probability maps against binary ground truth; a pixel is
/// foreground when its probability is >= threshold.
SegMetrics evaluate_predictions(const std::vector<Image>& probs, const std::vector<Image>& gts, double threshold = 0.5);

/// Encoder of conv stages (stride 2 after the first) with an inverted decoder
/// mirroring the stages and concatenating the encoder features.
template <typename S>
class SegModel {
 public:
  SegModel(const SegConfig& config, std::uint64_t seed);

  const SegConfig& config() const { return config_; }
  ParamStore<S>& params() { return params_; }
  const ParamStore<S>& params() const { return params_; }

  /// Logits of shape (N, H, W, 1).
  Var<S> operator()(const Var<S>& images) const;

  /// Sigmoid probabilities for a batch, without recording a graph.
  Tensor<S> predict(const Tensor<S>& images) const;

  /// Independent copy with the same weights.
  SegModel clone() const;

 private:
  struct Stage {
    nn::Conv2d<S> conv1;
    nn::GroupNorm<S> norm1;
    nn::Conv2d<S> conv2;
    nn::GroupNorm<S> norm2;
  };
  struct UpStage {
    nn::Conv2d<S> up;
    nn::Conv2d<S> merge;
    nn::GroupNorm<S> norm;
  };
  SegConfig config_;
  std::uint64_t seed_;
  ParamStore<S> params_;
  std::vector<Stage> encoder_;
  std::vector<UpStage> decoder_;
  nn::Conv2d<S> head_;
};

/// Combined loss dice_weight * (1 - soft Dice) + bce_weight * BCE on logits.
template <typename S>
Var<S> segmentation_loss(const Var<S>& logits, const Tensor<S>& target, const SegConfig& config);

/// Trains a fresh model from `seed` with SGD on the combined Dice + BCE loss.
SegModel<float> train_segmenter(const std::vector<ImageMaskPair>& train, const SegConfig& config,
                                std::uint64_t seed);

/// Continues training a copy of `model` on `pairs`; zero epochs returns an
/// identical copy.
SegModel<float> finetune(const SegModel<float>& model, const std::vector<ImageMaskPair>& pairs,
                         const SegConfig& config, std::uint64_t seed);

SegMetrics evaluate(const SegModel<float>& model, const std::vector<ImageMaskPair>& test, double threshold = 0.5);

extern template class SegModel<float>;
extern template class SegModel<double>;

}  // namespace pairdiff
