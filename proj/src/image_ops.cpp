#include "pairdiff/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace pairdiff {

Image resize_bilinear(const Image& image, int out_h, int out_w) {
  if (out_h <= 0 || out_w <= 0) throw std::invalid_argument("resize_bilinear: non-positive size");
  const int in_h = image.h(), in_w = image.w(), c = image.c();
  Image out(Shape{image.n(), out_h, out_w, c});
  const double sy = double(in_h) / out_h;
  const double sx = double(in_w) / out_w;
  for (int y = 0; y < out_h; ++y) {
    const double fy = std::max(0.0, (y + 0.5) * sy - 0.5);
    const int y0 = std::min(int(fy), in_h - 1);
    const int y1 = std::min(y0 + 1, in_h - 1);
    const double wy = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      const double fx = std::max(0.0, (x + 0.5) * sx - 0.5);
      const int x0 = std::min(int(fx), in_w - 1);
      const int x1 = std::min(x0 + 1, in_w - 1);
      const double wx = fx - x0;
      for (int n = 0; n < image.n(); ++n)
        for (int ch = 0; ch < c; ++ch) {
          const double top = (1 - wx) * image(n, y0, x0, ch) + wx * image(n, y0, x1, ch);
          const double bottom = (1 - wx) * image(n, y1, x0, ch) + wx * image(n, y1, x1, ch);
          out(n, y, x, ch) = float((1 - wy) * top + wy * bottom);
        }
    }
  }
  return out;
}

Image resize_nearest(const Image& image, int out_h, int out_w) {
  if (out_h <= 0 || out_w <= 0) throw std::invalid_argument("resize_nearest: non-positive size");
  Image out(Shape{image.n(), out_h, out_w, image.c()});
  for (int n = 0; n < image.n(); ++n)
    for (int y = 0; y < out_h; ++y) {
      const int sy = std::min(int(std::int64_t(y) * image.h() / out_h), image.h() - 1);
      for (int x = 0; x < out_w; ++x) {
        const int sx = std::min(int(std::int64_t(x) * image.w() / out_w), image.w() - 1);
        for (int ch = 0; ch < image.c(); ++ch) out(n, y, x, ch) = image(n, sy, sx, ch);
      }
    }
  return out;
}

Image crop(const Image& image, int y0, int x0, int h, int w) {
  if (y0 < 0 || x0 < 0 || h <= 0 || w <= 0 || y0 + h > image.h() || x0 + w > image.w())
    throw std::invalid_argument("crop: window outside image");
  Image out(Shape{image.n(), h, w, image.c()});
  for (int n = 0; n < image.n(); ++n)
    for (int y = 0; y < h; ++y)
      std::copy_n(image.data() + image.index(n, y0 + y, x0, 0), std::size_t(w) * image.c(),
                  out.data() + out.index(n, y, 0, 0));
  return out;
}

Image flip_horizontal(const Image& image) {
  Image out(image.shape());
  for (int n = 0; n < image.n(); ++n)
    for (int y = 0; y < image.h(); ++y)
      for (int x = 0; x < image.w(); ++x)
        for (int c = 0; c < image.c(); ++c) out(n, y, x, c) = image(n, y, image.w() - 1 - x, c);
  return out;
}

Image flip_vertical(const Image& image) {
  Image out(image.shape());
  for (int n = 0; n < image.n(); ++n)
    for (int y = 0; y < image.h(); ++y)
      std::copy_n(image.data() + image.index(n, image.h() - 1 - y, 0, 0), std::size_t(image.w()) * image.c(),
                  out.data() + out.index(n, y, 0, 0));
  return out;
}

Image binarize(const Image& mask, float threshold) {
  Image out(mask.shape());
  out.array() = (mask.array() >= threshold).cast<float>();
  return out;
}

ImageMaskPair resize_pair(const ImageMaskPair& pair, int out_h, int out_w) {
  return ImageMaskPair{resize_bilinear(pair.image, out_h, out_w), resize_nearest(pair.mask, out_h, out_w), pair.id};
}

ImageMaskPair upsample_pair(const ImageMaskPair& pair, int factor) {
  if (factor < 1) throw std::invalid_argument("upsample_pair: factor must be >= 1");
  return resize_pair(pair, pair.height() * factor, pair.width() * factor);
}

float foreground_fraction(const Image& mask) { return mask.size() ? float(mask.vec().mean()) : 0.0f; }

Tensor<float> pairs_to_state(const std::vector<ImageMaskPair>& pairs) {
  if (pairs.empty()) throw std::invalid_argument("pairs_to_state: no pairs");
  std::vector<Tensor<float>> items;
  items.reserve(pairs.size());
  for (const auto& p : pairs) items.push_back(Tensor<float>::concat_channels({p.image, p.mask}));
  Tensor<float> state = Tensor<float>::stack(items);
  state.array() = state.array() * 2.0f - 1.0f;
  return state;
}

std::vector<ImageMaskPair> state_to_pairs(const Tensor<float>& state, int image_channels, const std::string& prefix,
                                          int first_index) {
  if (state.c() != image_channels + 1)
    throw ShapeError("state_to_pairs: expected " + std::to_string(image_channels + 1) + " channels, got " +
                     state.shape().str());
  std::vector<ImageMaskPair> out;
  out.reserve(std::size_t(state.n()));
  for (int n = 0; n < state.n(); ++n) {
    Tensor<float> one = state.batch(n, 1);
    one.array() = ((one.array() + 1.0f) * 0.5f).min(1.0f).max(0.0f);
    char id[32];
    std::snprintf(id, sizeof id, "%06d", first_index + n);
    out.push_back(ImageMaskPair{one.channels(0, image_channels), binarize(one.channels(image_channels, 1), 0.5f),
                                prefix + id});
  }
  return out;
}

void ImageMaskPair::validate() const {
  if (image.h() != mask.h() || image.w() != mask.w() || image.n() != mask.n())
    throw ShapeError("pair '" + id + "': image " + image.shape().str() + " and mask " + mask.shape().str() +
                     " differ");
  if (mask.c() != 1) throw ShapeError("pair '" + id + "': mask must have one channel");
  for (float v : mask.vec())
    if (v != 0.0f && v != 1.0f) throw std::invalid_argument("pair '" + id + "': mask is not binary");
}

ImageMaskPair augment(const ImageMaskPair& pair, int crop_size, int out_size, Rng& rng) {
  if (pair.height() < crop_size || pair.width() < crop_size)
    throw std::invalid_argument("augment: source " + std::to_string(pair.height()) + "x" +
                                std::to_string(pair.width()) + " smaller than crop " + std::to_string(crop_size));
  const int y0 = uniform_int(rng, 0, pair.height() - crop_size);
  const int x0 = uniform_int(rng, 0, pair.width() - crop_size);
  ImageMaskPair out{crop(pair.image, y0, x0, crop_size, crop_size), crop(pair.mask, y0, x0, crop_size, crop_size),
                    pair.id};
  if (crop_size != out_size) out = resize_pair(out, out_size, out_size);
  if (uniform_real(rng) < 0.5) {
    out.image = flip_horizontal(out.image);
    out.mask = flip_horizontal(out.mask);
  }
  if (uniform_real(rng) < 0.5) {
    out.image = flip_vertical(out.image);
    out.mask = flip_vertical(out.mask);
  }
  return out;
}

std::vector<ImageMaskPair> prepare_eval_crops(const std::vector<ImageMaskPair>& sources, int crop_px, int out_size) {
  if (crop_px <= 0 || out_size <= 0) throw std::invalid_argument("prepare_eval_crops: non-positive size");
  std::vector<ImageMaskPair> out;
  for (const auto& src : sources) {
    if (src.height() % crop_px != 0 || src.width() % crop_px != 0)
      throw std::invalid_argument("prepare_eval_crops: " + std::to_string(src.height()) + "x" +
                                  std::to_string(src.width()) + " source is not divisible into " +
                                  std::to_string(crop_px) + "-pixel tiles");
    for (int ty = 0; ty < src.height() / crop_px; ++ty)
      for (int tx = 0; tx < src.width() / crop_px; ++tx) {
        ImageMaskPair tile{crop(src.image, ty * crop_px, tx * crop_px, crop_px, crop_px),
                           crop(src.mask, ty * crop_px, tx * crop_px, crop_px, crop_px),
                           src.id + "_r" + std::to_string(ty) + "c" + std::to_string(tx)};
        out.push_back(crop_px == out_size ? std::move(tile) : resize_pair(tile, out_size, out_size));
      }
  }
  return out;
}

std::pair<std::vector<ImageMaskPair>, std::vector<ImageMaskPair>> split_dataset(
    const std::vector<ImageMaskPair>& data, double ratio, std::uint64_t seed) {
  if (data.empty()) throw std::invalid_argument("split_dataset: empty dataset");
  if (!(ratio > 0.0 && ratio < 1.0)) throw std::invalid_argument("split_dataset: ratio must lie in (0, 1)");
  std::vector<std::size_t> order(data.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_train = std::size_t(std::lround(ratio * double(data.size())));
  std::pair<std::vector<ImageMaskPair>, std::vector<ImageMaskPair>> out;
  for (std::size_t i = 0; i < order.size(); ++i) (i < n_train ? out.first : out.second).push_back(data[order[i]]);
  return out;
}

}  // namespace pairdiff
