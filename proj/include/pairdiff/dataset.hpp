#pragma once

#include "pairdiff/rng.hpp"
#include "pairdiff/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace pairdiff {

using Image = Tensor<float>;

/// An image in [0, 1] (1, H, W, C) with its aligned binary mask (1, H, W, 1).
struct ImageMaskPair {
  Image image;
  Image mask;
  std::string id;

  int height() const { return image.h(); }
  int width() const { return image.w(); }
  /// Throws if the shapes disagree or the mask is not exactly {0, 1}.
  void validate() const;
};

// Resampling. Bilinear uses half-pixel centres without corner alignment and
// clamps at the borders; nearest maps output pixel i to floor(i * in / out).
Image resize_bilinear(const Image& image, int out_h, int out_w);
Image resize_nearest(const Image& image, int out_h, int out_w);
Image crop(const Image& image, int y0, int x0, int h, int w);
Image flip_horizontal(const Image& image);
Image flip_vertical(const Image& image);
/// 1 where value >= threshold, else 0.
Image binarize(const Image& mask, float threshold = 0.5f);

/// Image bilinear, mask nearest, to (out_h, out_w).
ImageMaskPair resize_pair(const ImageMaskPair& pair, int out_h, int out_w);
ImageMaskPair upsample_pair(const ImageMaskPair& pair, int factor);

/// Channel-stacked (N, H, W, C + 1) tensor of images then masks, mapped from
/// [0, 1] to the diffusion range [-1, 1].
Tensor<float> pairs_to_state(const std::vector<ImageMaskPair>& pairs);
/// Inverse of pairs_to_state: images clamped to [0, 1]; masks binarized with
/// the >= 0.5 rule. Ids are `prefix` followed by a zero-padded index.
std::vector<ImageMaskPair> state_to_pairs(const Tensor<float>& state, int image_channels,
                                          const std::string& prefix = "pair_", int first_index = 0);

struct LoadResult {
  std::vector<ImageMaskPair> pairs;
  /// Relative paths of files without a counterpart (or unreadable ones).
  std::vector<std::string> unmatched;
  std::vector<std::string> warnings;
};

/// Reads `root/images/<id>.png` with `root/masks/<id>.png`. Images are scaled
/// by 1/255; masks are binarized at 128. Throws on a size mismatch within a pair.
LoadResult load_dataset(const std::filesystem::path& root);

/// Procedural stand-in for field imagery: 3-12 bright ellipses over a dim,
/// low-frequency textured background; the mask is the exact ellipse support.
std::vector<ImageMaskPair> make_toy_dataset(int n, int size, std::uint64_t seed);

struct ExportInfo {
  std::string checkpoint;
  std::string sampler_mode;
  int sampler_steps = 0;
  std::uint64_t seed = 0;
  std::string config_hash;
};

/// Writes the load_dataset layout plus `manifest.json` (written last,
/// atomically). Images are quantized to 8 bits; masks are thresholded with
/// the >= rule and stored as {0, 255}. Returns the manifest path.
std::filesystem::path export_generated(const std::vector<ImageMaskPair>& pairs, const std::filesystem::path& dir,
                                       const ExportInfo& info, float threshold = 0.5f);

/// Non-overlapping crop x crop tiles of every source, each resized to
/// out_size. Throws unless both source dimensions are multiples of `crop`.
std::vector<ImageMaskPair> prepare_eval_crops(const std::vector<ImageMaskPair>& sources, int crop, int out_size);

/// Random crop, resize to `out_size`, and independent 50% horizontal and
/// vertical flips applied identically to image and mask.
ImageMaskPair augment(const ImageMaskPair& pair, int crop_size, int out_size, Rng& rng);

/// Partition into (train, validation) after a seeded shuffle; the train part
/// holds round(ratio * n) items.
std::pair<std::vector<ImageMaskPair>, std::vector<ImageMaskPair>> split_dataset(
    const std::vector<ImageMaskPair>& data, double ratio, std::uint64_t seed);

float foreground_fraction(const Image& mask);

// PNG I/O (8-bit). Gray images load as one channel, RGB(A) as three.
Image read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image& image);

/// Writes `content` to `path` through a temporary file and a rename.
void write_file_atomic(const std::filesystem::path& path, const std::string& content);

}  // namespace pairdiff
