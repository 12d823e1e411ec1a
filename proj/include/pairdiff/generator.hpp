#pragma once

#include "pairdiff/unet.hpp"

#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace pairdiff {

enum class Variant { kTwoEncoder, kSharedEncoder, kConcat };
enum class SkipFusion { kDirect, kZeroConv, kScaleU };

Variant parse_variant(const std::string& text);
SkipFusion parse_skip_fusion(const std::string& text);
std::string to_string(Variant v);
std::string to_string(SkipFusion f);

struct PairedGeneratorConfig {
  Variant variant = Variant::kTwoEncoder;
  SkipFusion skip_fusion = SkipFusion::kScaleU;
  int base_channels = 16;
  int depth = 2;
  int blocks_per_level = 2;
  int attention_heads = 4;
  int image_channels = 3;
  int mask_channels = 1;
  int input_size = 16;
  int timesteps = 1000;

  int state_channels() const { return image_channels + mask_channels; }
  int bottleneck_channels() const { return base_channels << depth; }
  /// Throws std::invalid_argument describing the first violated constraint.
  void validate() const;
};

/// Learned parameters for merging cross-branch skips into a backbone feature map.
template <typename S>
struct FuseParams {
  Var<S> backbone_scale;
  std::vector<Var<S>> skip_scales;
  std::vector<nn::Conv2d<S>> zero_convs;

  static FuseParams make(ParamStore<S>& ps, const std::string& name, SkipFusion mode, int backbone_channels,
                         const std::vector<int>& skip_channels);
};

/// Concatenates `skips` onto `backbone` along channels.
///  - Direct: plain concatenation.
///  - ZeroConv: each skip goes through its zero-initialized 1x1 convolution first.
///  - ScaleU: backbone scaled by (1 + backbone_scale), skip i by (1 + skip_scales[i]).
template <typename S>
Var<S> fuse_skip(const Var<S>& backbone, std::span<const Var<S>> skips, SkipFusion mode,
                 const FuseParams<S>& params);

struct GeneratorForwardOptions {
  /// Replace every cross-branch skip input with zeros (ablation probe).
  bool sever_cross_links = false;
};

/// Noise predictor over image-mask pairs in one of three layouts:
///  - TwoEncoder: separate U-Nets for image and mask exchanging features
///    after every down and up level, with shared self/cross attention in the
///    bottleneck.
///  - SharedEncoder: one encoder+bottleneck applied to image and (lifted) mask
///    independently, then two decoders linked at every up level.
///  - Concat: one U-Net over the channel-stacked pair.
template <typename S>
class PairedGenerator {
 public:
  PairedGenerator(const PairedGeneratorConfig& config, std::uint64_t seed);
  ~PairedGenerator();
  PairedGenerator(PairedGenerator&&) noexcept;
  PairedGenerator& operator=(PairedGenerator&&) noexcept;

  const PairedGeneratorConfig& config() const { return config_; }
  ParamStore<S>& params() { return params_; }
  const ParamStore<S>& params() const { return params_; }

  /// Returns (eps_x, eps_y) with the shapes of (x_t, y_t).
  std::pair<Var<S>, Var<S>> predict_noise(const Var<S>& x_t, const Var<S>& y_t, std::span<const int> t,
                                          const GeneratorForwardOptions& options = {}) const;

  /// Same prediction on a channel-stacked (C+1) state; the result is stacked too.
  Var<S> predict_stacked(const Var<S>& state, std::span<const int> t,
                         const GeneratorForwardOptions& options = {}) const;

 private:
  struct Impl;
  PairedGeneratorConfig config_;
  ParamStore<S> params_;
  std::unique_ptr<Impl> impl_;
};

extern template class PairedGenerator<float>;
extern template class PairedGenerator<double>;

}  // namespace pairdiff
