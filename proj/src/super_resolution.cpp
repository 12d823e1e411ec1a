#include "pairdiff/super_resolution.hpp"

#include <algorithm>
#include <stdexcept>

namespace pairdiff {

void SRConfig::validate() const {
  if (low_size < 1) throw std::invalid_argument("sr config: low_size must be positive");
  if (high_size != 2 * low_size) throw std::invalid_argument("sr config: high_size must equal 2 * low_size");
  if (depth < 1) throw std::invalid_argument("sr config: depth must be >= 1");
  if (high_size % (1 << depth) != 0)
    throw std::invalid_argument("sr config: high_size must be divisible by 2^depth");
  if (base_channels < 1 || blocks_per_level < 1 || image_channels < 1)
    throw std::invalid_argument("sr config: channel and block counts must be positive");
  if (steps_train < 1) throw std::invalid_argument("sr config: steps_train must be positive");
  if (steps_infer < 1 || steps_infer > steps_train)
    throw std::invalid_argument("sr config: steps_infer must lie in [1, steps_train]");
}

template <typename S>
Tensor<S> resize_conditioning(const Tensor<S>& lowres, int size, int image_channels) {
  if (lowres.c() != image_channels + 1) throw ShapeError("sr conditioning: wrong channel count " + lowres.shape().str());
  if (lowres.h() == size && lowres.w() == size) return lowres;
  const Tensor<float> f = lowres.template cast<float>();
  Tensor<float> image = resize_bilinear(f.channels(0, image_channels), size, size);
  Tensor<float> mask = resize_nearest(f.channels(image_channels, 1), size, size);
  return Tensor<float>::concat_channels({image, mask}).template cast<S>();
}

template <typename S>
SRModel<S>::SRModel(const SRConfig& config, std::uint64_t seed) : config_(config), params_(seed) {
  config_.validate();
  skip_coef_ = (1.0 - make_linear_schedule(config_.steps_train).alpha_bars.array()).sqrt();
  nn::UNetShape shape;
  shape.base_channels = config_.base_channels;
  shape.depth = config_.depth;
  shape.blocks_per_level = config_.blocks_per_level;
  shape.emb_dim = 4 * config_.base_channels;
  shape.cond_channels = config_.state_channels();
  time_ = nn::TimeEmbedding<S>::make(params_, "sr.time", config_.base_channels, shape.emb_dim);
  encoder_ = nn::Encoder<S>::make(params_, "sr.enc", config_.state_channels(), shape);
  mid_ = nn::Bottleneck<S>::make(params_, "sr.mid", shape.channels(shape.depth), shape.emb_dim);
  decoder_ = nn::Decoder<S>::make(params_, "sr.dec", config_.state_channels(), shape);
}

template <typename S>
Var<S> SRModel<S>::forward(const Var<S>& x_t_high, std::span<const int> t, const Tensor<S>& lowres) const {
  const Shape& xs = x_t_high.shape();
  if (xs.h != config_.high_size || xs.w != config_.high_size || xs.c != config_.state_channels())
    throw ShapeError("sr_forward: state " + xs.str() + " does not match the configured high-res pair");
  if (lowres.n() != xs.n || lowres.h() != config_.low_size || lowres.w() != config_.low_size ||
      lowres.c() != config_.state_channels())
    throw ShapeError("sr_forward: conditioning " + lowres.shape().str() + " does not match state " + xs.str());
  if (int(t.size()) != xs.n) throw ShapeError("sr_forward: one timestep per batch element required");
  for (int ti : t)
    if (ti < 1 || ti > config_.steps_train) throw std::out_of_range("sr_forward: timestep out of range");

  std::vector<Var<S>> cond;
  for (int l = 0; l < config_.depth; ++l)
    cond.push_back(ops::constant(resize_conditioning(lowres, config_.high_size >> l, config_.image_channels)));

  auto emb = time_(t);
  auto h = encoder_.stem(x_t_high);
  std::vector<Var<S>> skips;
  for (int l = 0; l < config_.depth; ++l) {
    h = encoder_.level(l, h, emb, cond[std::size_t(l)]);
    skips.push_back(h);
    h = encoder_.downsample(l, h);
  }
  h = mid_.first(h, emb);
  h = mid_.second(h, emb);
  for (int l = config_.depth - 1; l >= 0; --l) {
    auto u = decoder_.upsample(l, h);
    h = decoder_.level(l, ops::concat_channels<S>({u, skips[std::size_t(l)]}), emb, cond[std::size_t(l)]);
  }
  if (!config_.output_skip) return decoder_.head(h);
  std::vector<S> coef;
  for (int ti : t) coef.push_back(S(skip_coef_[ti - 1]));
  return ops::add(decoder_.head(h), ops::mul_broadcast(x_t_high, ops::per_sample<S>(coef)));
}

std::vector<ImageMaskPair> super_resolve(const SRModel<float>& model, const NoiseSchedule& sched,
                                         const std::vector<ImageMaskPair>& lowres, const SamplerOptions& options,
                                         std::uint64_t seed, int chunk) {
  if (chunk < 1) throw std::invalid_argument("super_resolve: chunk must be positive");
  if (sched.T != model.config().steps_train)
    throw std::invalid_argument("super_resolve: schedule length differs from the model's training length");
  const SRConfig& cfg = model.config();
  std::vector<ImageMaskPair> out;
  out.reserve(lowres.size());
  NoGradGuard guard;
  for (std::size_t b = 0; b < lowres.size(); b += std::size_t(chunk)) {
    const std::size_t e = std::min(lowres.size(), b + std::size_t(chunk));
    const std::vector<ImageMaskPair> part(lowres.begin() + std::ptrdiff_t(b), lowres.begin() + std::ptrdiff_t(e));
    for (const auto& p : part)
      if (p.height() != cfg.low_size || p.width() != cfg.low_size)
        throw ShapeError("super_resolve: pair '" + p.id + "' is not " + std::to_string(cfg.low_size) + " pixels");
    const Tensor<float> cond = pairs_to_state(part);
    NoisePredictor<float> predictor = [&](const Tensor<float>& x, std::span<const int> t) {
      return model.forward(Var<float>(x), t, cond).value();
    };
    Rng rng(derive_seed(seed, b));
    const Shape shape{int(part.size()), cfg.high_size, cfg.high_size, cfg.state_channels()};
    const Tensor<float> state = sample_loop<float>(predictor, sched, shape, options, rng);
    auto pairs = state_to_pairs(state, cfg.image_channels);
    for (std::size_t i = 0; i < pairs.size(); ++i) {
      pairs[i].id = part[i].id;
      out.push_back(std::move(pairs[i]));
    }
  }
  return out;
}

ImageMaskPair super_resolve(const SRModel<float>& model, const NoiseSchedule& sched, const ImageMaskPair& lowres,
                            const SamplerOptions& options, std::uint64_t seed) {
  return super_resolve(model, sched, std::vector<ImageMaskPair>{lowres}, options, seed).front();
}

template class SRModel<float>;
template class SRModel<double>;
template Tensor<float> resize_conditioning(const Tensor<float>&, int, int);
template Tensor<double> resize_conditioning(const Tensor<double>&, int, int);

}  // namespace pairdiff
