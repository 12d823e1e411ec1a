#pragma once

#include "pairdiff/dataset.hpp"
#include "pairdiff/diffusion.hpp"
#include "pairdiff/unet.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace pairdiff {

struct SRConfig {
  int low_size = 16;
  int high_size = 32;
  int steps_train = 1000;
  int steps_infer = 100;
  SamplerMode infer_mode = SamplerMode::kDdim;
  int base_channels = 16;
  int depth = 2;
  int blocks_per_level = 1;
  int image_channels = 3;
  /// Adds sqrt(1 - abar_t) * x_t to the network output, so near t = T the
  /// noise estimate is the input itself and the U-Net only learns a residual.
  bool output_skip = true;

  int state_channels() const { return image_channels + 1; }
  void validate() const;
};

/// Conditioning for one U-Net level: the low-resolution state resized to
/// `size`, bilinear for image channels and nearest for the mask channel.
template <typename S>
Tensor<S> resize_conditioning(const Tensor<S>& lowres, int size, int image_channels);

/// Noise predictor on the high-resolution pair state. The low-resolution pair
/// is resized to every level and concatenated before each down and up block.
template <typename S>
class SRModel {
 public:
  SRModel(const SRConfig& config, std::uint64_t seed);

  const SRConfig& config() const { return config_; }
  ParamStore<S>& params() { return params_; }
  const ParamStore<S>& params() const { return params_; }

  /// x_t_high: (N, high, high, C+1); lowres: (N, low, low, C+1), both in [-1, 1].
  Var<S> forward(const Var<S>& x_t_high, std::span<const int> t, const Tensor<S>& lowres) const;

 private:
  SRConfig config_;
  Eigen::VectorXd skip_coef_;
  ParamStore<S> params_;
  nn::TimeEmbedding<S> time_;
  nn::Encoder<S> encoder_;
  nn::Bottleneck<S> mid_;
  nn::Decoder<S> decoder_;
};

template <typename S>
Var<S> sr_forward(const SRModel<S>& model, const Var<S>& x_t_high, std::span<const int> t, const Tensor<S>& lowres) {
  return model.forward(x_t_high, t, lowres);
}

/// Samples high-resolution pairs for every low-resolution pair, `chunk` at a
/// time. Images are clamped to [0, 1]; masks are binarized at 0.5.
std::vector<ImageMaskPair> super_resolve(const SRModel<float>& model, const NoiseSchedule& sched,
                                         const std::vector<ImageMaskPair>& lowres, const SamplerOptions& options,
                                         std::uint64_t seed, int chunk = 64);

ImageMaskPair super_resolve(const SRModel<float>& model, const NoiseSchedule& sched, const ImageMaskPair& lowres,
                            const SamplerOptions& options, std::uint64_t seed);

extern template class SRModel<float>;
extern template class SRModel<double>;

}  // namespace pairdiff
