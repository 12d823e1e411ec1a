#include "pairdiff/generator.hpp"

#include <optional>
#include <stdexcept>

namespace pairdiff {

Variant parse_variant(const std::string& text) {
  if (text == "two_encoder" || text == "TwoEncoder") return Variant::kTwoEncoder;
  if (text == "shared_encoder" || text == "SharedEncoder") return Variant::kSharedEncoder;
  if (text == "concat" || text == "Concat") return Variant::kConcat;
  throw std::invalid_argument("unknown generator variant '" + text +
                              "' (expected concat, two_encoder or shared_encoder)");
}

SkipFusion parse_skip_fusion(const std::string& text) {
  if (text == "direct" || text == "Direct") return SkipFusion::kDirect;
  if (text == "zero_conv" || text == "ZeroConv") return SkipFusion::kZeroConv;
  if (text == "scale_u" || text == "ScaleU") return SkipFusion::kScaleU;
  throw std::invalid_argument("unknown skip fusion '" + text + "' (expected direct, zero_conv or scale_u)");
}

std::string to_string(Variant v) {
  switch (v) {
    case Variant::kTwoEncoder:
      return "two_encoder";
    case Variant::kSharedEncoder:
      return "shared_encoder";
    case Variant::kConcat:
      return "concat";
  }
  return "?";
}

std::string to_string(SkipFusion f) {
  switch (f) {
    case SkipFusion::kDirect:
      return "direct";
    case SkipFusion::kZeroConv:
      return "zero_conv";
    case SkipFusion::kScaleU:
      return "scale_u";
  }
  return "?";
}

void PairedGeneratorConfig::validate() const {
  auto fail = [](const std::string& msg) { throw std::invalid_argument("generator config: " + msg); };
  if (base_channels <= 0) fail("base_channels must be positive");
  if (depth <= 0) fail("depth must be positive");
  if (blocks_per_level <= 0) fail("blocks_per_level must be positive");
  if (attention_heads <= 0) fail("attention_heads must be positive");
  if (image_channels <= 0) fail("image_channels must be positive");
  if (mask_channels != 1) fail("mask_channels must be 1");
  if (input_size <= 0) fail("input_size must be positive");
  if (timesteps <= 0) fail("timesteps must be positive");
  if (input_size % (1 << depth) != 0)
    fail("input_size " + std::to_string(input_size) + " is not divisible by 2^depth = " + std::to_string(1 << depth));
  if (bottleneck_channels() % attention_heads != 0)
    fail("bottleneck channels " + std::to_string(bottleneck_channels()) + " not divisible by attention_heads");
}

template <typename S>
FuseParams<S> FuseParams<S>::make(ParamStore<S>& ps, const std::string& name, SkipFusion mode,
                                  int backbone_channels, const std::vector<int>& skip_channels) {
  FuseParams f;
  if (mode == SkipFusion::kScaleU) {
    f.backbone_scale = ps.add(name + ".scale_backbone", Shape{1, 1, 1, backbone_channels}, Init::kZeros);
    for (std::size_t i = 0; i < skip_channels.size(); ++i)
      f.skip_scales.push_back(
          ps.add(name + ".scale_skip" + std::to_string(i), Shape{1, 1, 1, skip_channels[i]}, Init::kZeros));
  } else if (mode == SkipFusion::kZeroConv) {
    for (std::size_t i = 0; i < skip_channels.size(); ++i)
      f.zero_convs.push_back(nn::Conv2d<S>::make(ps, name + ".zero" + std::to_string(i), skip_channels[i],
                                                 skip_channels[i], 1, 1, Init::kZeros));
  }
  return f;
}

template <typename S>
Var<S> fuse_skip(const Var<S>& backbone, std::span<const Var<S>> skips, SkipFusion mode,
                 const FuseParams<S>& params) {
  const Shape b = backbone.shape();
  for (const auto& s : skips) {
    if (s.shape().n != b.n || s.shape().h != b.h || s.shape().w != b.w)
      throw ShapeError("fuse_skip: skip " + s.shape().str() + " does not match backbone " + b.str());
  }
  std::vector<Var<S>> parts;
  parts.reserve(skips.size() + 1);
  switch (mode) {
    case SkipFusion::kDirect:
      parts.push_back(backbone);
      parts.insert(parts.end(), skips.begin(), skips.end());
      break;
    case SkipFusion::kZeroConv:
      if (params.zero_convs.size() != skips.size()) throw std::invalid_argument("fuse_skip: zero-conv count mismatch");
      parts.push_back(backbone);
      for (std::size_t i = 0; i < skips.size(); ++i) parts.push_back(params.zero_convs[i](skips[i]));
      break;
    case SkipFusion::kScaleU:
      if (params.skip_scales.size() != skips.size()) throw std::invalid_argument("fuse_skip: scale count mismatch");
      parts.push_back(ops::mul_broadcast(backbone, ops::add_scalar(params.backbone_scale, S(1))));
      for (std::size_t i = 0; i < skips.size(); ++i)
        parts.push_back(ops::mul_broadcast(skips[i], ops::add_scalar(params.skip_scales[i], S(1))));
      break;
  }
  return ops::concat_channels(parts);
}

namespace {

template <typename S>
Var<S> zeros_like(const Var<S>& v) {
  return ops::constant(Tensor<S>::zeros(v.shape()));
}

template <typename S>
struct Branch {
  nn::TimeEmbedding<S> time;
  nn::Encoder<S> encoder;
  nn::Bottleneck<S> mid;
  nn::Decoder<S> decoder;
};

}  // namespace

template <typename S>
struct PairedGenerator<S>::Impl {
  nn::UNetShape shape;
  // TwoEncoder uses x and y; Concat and SharedEncoder use x only for the encoder side.
  std::optional<Branch<S>> x;
  std::optional<Branch<S>> y;
  std::optional<nn::Decoder<S>> shared_mask_decoder;
  std::optional<nn::Conv2d<S>> mask_lift;
  std::optional<nn::PairAttention<S>> pair_attention;
  std::optional<nn::Attention<S>> self_attention;
  std::vector<FuseParams<S>> down_fuse_x, down_fuse_y, up_fuse_x, up_fuse_y;
};

template <typename S>
PairedGenerator<S>::PairedGenerator(const PairedGeneratorConfig& config, std::uint64_t seed)
    : config_(config), params_(seed), impl_(std::make_unique<Impl>()) {
  config_.validate();
  auto& ps = params_;
  Impl& m = *impl_;
  const int c_img = config_.image_channels;
  const int emb_dim = 4 * config_.base_channels;
  nn::UNetShape shape{config_.base_channels, config_.depth, config_.blocks_per_level, emb_dim, 0, 0};
  const int bottleneck = config_.bottleneck_channels();
  const int heads = config_.attention_heads;

  auto make_branch = [&](const std::string& name, int in_ch, int out_ch, const nn::UNetShape& s) {
    return Branch<S>{nn::TimeEmbedding<S>::make(ps, name + ".time", config_.base_channels, emb_dim),
                     nn::Encoder<S>::make(ps, name + ".enc", in_ch, s), nn::Bottleneck<S>::make(ps, name + ".mid", bottleneck, emb_dim),
                     nn::Decoder<S>::make(ps, name + ".dec", out_ch, s)};
  };

  switch (config_.variant) {
    case Variant::kConcat: {
      m.shape = shape;
      m.x = make_branch("unet", config_.state_channels(), config_.state_channels(), shape);
      m.self_attention = nn::Attention<S>::make(ps, "unet.mid.attn", bottleneck, heads);
      break;
    }
    case Variant::kTwoEncoder: {
      shape.cross_inputs = 1;
      m.shape = shape;
      m.x = make_branch("gx", c_img, c_img, shape);
      m.y = make_branch("gy", config_.mask_channels, config_.mask_channels, shape);
      m.pair_attention = nn::PairAttention<S>::make(ps, "pair_attn", bottleneck, heads);
      for (int l = 0; l < config_.depth; ++l) {
        const int ch = shape.channels(l);
        const std::string lv = std::to_string(l);
        m.down_fuse_x.push_back(FuseParams<S>::make(ps, "gx.fuse_down" + lv, config_.skip_fusion, ch, {ch}));
        m.down_fuse_y.push_back(FuseParams<S>::make(ps, "gy.fuse_down" + lv, config_.skip_fusion, ch, {ch}));
        m.up_fuse_x.push_back(FuseParams<S>::make(ps, "gx.fuse_up" + lv, config_.skip_fusion, 2 * ch, {ch}));
        m.up_fuse_y.push_back(FuseParams<S>::make(ps, "gy.fuse_up" + lv, config_.skip_fusion, 2 * ch, {ch}));
      }
      break;
    }
    case Variant::kSharedEncoder: {
      nn::UNetShape enc_shape = shape;
      nn::UNetShape dec_shape = shape;
      dec_shape.cross_inputs = 1;
      m.shape = dec_shape;
      m.x = Branch<S>{nn::TimeEmbedding<S>::make(ps, "shared.time", config_.base_channels, emb_dim),
                      nn::Encoder<S>::make(ps, "shared.enc", c_img, enc_shape),
                      nn::Bottleneck<S>::make(ps, "shared.mid", bottleneck, emb_dim),
                      nn::Decoder<S>::make(ps, "dx", c_img, dec_shape)};
      m.shared_mask_decoder = nn::Decoder<S>::make(ps, "dy", config_.mask_channels, dec_shape);
      m.mask_lift = nn::Conv2d<S>::make(ps, "shared.mask_lift", config_.mask_channels, c_img, 1);
      m.pair_attention = nn::PairAttention<S>::make(ps, "shared.pair_attn", bottleneck, heads);
      for (int l = 0; l < config_.depth; ++l) {
        const int ch = shape.channels(l);
        const std::string lv = std::to_string(l);
        m.up_fuse_x.push_back(FuseParams<S>::make(ps, "dx.fuse_up" + lv, config_.skip_fusion, 2 * ch, {ch}));
        m.up_fuse_y.push_back(FuseParams<S>::make(ps, "dy.fuse_up" + lv, config_.skip_fusion, 2 * ch, {ch}));
      }
      break;
    }
  }
}

template <typename S>
PairedGenerator<S>::~PairedGenerator() = default;
template <typename S>
PairedGenerator<S>::PairedGenerator(PairedGenerator&&) noexcept = default;
template <typename S>
PairedGenerator<S>& PairedGenerator<S>::operator=(PairedGenerator&&) noexcept = default;

template <typename S>
std::pair<Var<S>, Var<S>> PairedGenerator<S>::predict_noise(const Var<S>& x_t, const Var<S>& y_t,
                                                            std::span<const int> t,
                                                            const GeneratorForwardOptions& options) const {
  const Shape sx = x_t.shape();
  const Shape sy = y_t.shape();
  if (sx.n != sy.n || sx.h != sy.h || sx.w != sy.w)
    throw ShapeError("predict_noise: image " + sx.str() + " and mask " + sy.str() + " disagree");
  if (sx.c != config_.image_channels || sy.c != config_.mask_channels)
    throw ShapeError("predict_noise: channel counts do not match the generator config");
  if (sx.h % (1 << config_.depth) != 0 || sx.w % (1 << config_.depth) != 0)
    throw ShapeError("predict_noise: spatial size not divisible by 2^depth");
  if (int(t.size()) != sx.n) throw ShapeError("predict_noise: one timestep per batch element required");
  for (int ti : t)
    if (ti < 1 || ti > config_.timesteps)
      throw std::out_of_range("predict_noise: timestep " + std::to_string(ti) + " outside [1, " +
                              std::to_string(config_.timesteps) + "]");

  const Impl& m = *impl_;
  const int depth = config_.depth;
  const SkipFusion mode = config_.skip_fusion;
  auto cross = [&](const Var<S>& v) { return options.sever_cross_links ? zeros_like(v) : v; };

  if (config_.variant == Variant::kConcat) {
    const Branch<S>& b = *m.x;
    auto emb = b.time(t);
    auto h = b.encoder.stem(ops::concat_channels<S>({x_t, y_t}));
    std::vector<Var<S>> skips;
    for (int l = 0; l < depth; ++l) {
      h = b.encoder.level(l, h, emb);
      skips.push_back(h);
      h = b.encoder.downsample(l, h);
    }
    h = b.mid.first(h, emb);
    h = ops::add(h, (*m.self_attention)(h, h));
    h = b.mid.second(h, emb);
    for (int l = depth - 1; l >= 0; --l) {
      auto u = b.decoder.upsample(l, h);
      h = b.decoder.level(l, ops::concat_channels<S>({u, skips[std::size_t(l)]}), emb);
    }
    auto out = b.decoder.head(h);
    return {ops::slice_channels(out, 0, sx.c), ops::slice_channels(out, sx.c, sy.c)};
  }

  if (config_.variant == Variant::kTwoEncoder) {
    const Branch<S>& bx = *m.x;
    const Branch<S>& by = *m.y;
    auto ex = bx.time(t);
    auto ey = by.time(t);
    auto hx = bx.encoder.stem(x_t);
    auto hy = by.encoder.stem(y_t);
    std::vector<Var<S>> skips_x, skips_y;
    for (int l = 0; l < depth; ++l) {
      hx = bx.encoder.level(l, hx, ex);
      hy = by.encoder.level(l, hy, ey);
      skips_x.push_back(hx);
      skips_y.push_back(hy);
      const Var<S> from_y[] = {cross(hy)};
      const Var<S> from_x[] = {cross(hx)};
      auto fx = fuse_skip<S>(hx, from_y, mode, m.down_fuse_x[std::size_t(l)]);
      auto fy = fuse_skip<S>(hy, from_x, mode, m.down_fuse_y[std::size_t(l)]);
      hx = bx.encoder.downsample(l, fx);
      hy = by.encoder.downsample(l, fy);
    }
    hx = bx.mid.first(hx, ex);
    hy = by.mid.first(hy, ey);
    std::tie(hx, hy) = (*m.pair_attention)(hx, hy);
    hx = bx.mid.second(hx, ex);
    hy = by.mid.second(hy, ey);
    for (int l = depth - 1; l >= 0; --l) {
      auto ux = bx.decoder.upsample(l, hx);
      auto uy = by.decoder.upsample(l, hy);
      const Var<S> from_y[] = {cross(uy)};
      const Var<S> from_x[] = {cross(ux)};
      auto fx = fuse_skip<S>(ops::concat_channels<S>({ux, skips_x[std::size_t(l)]}), from_y, mode,
                             m.up_fuse_x[std::size_t(l)]);
      auto fy = fuse_skip<S>(ops::concat_channels<S>({uy, skips_y[std::size_t(l)]}), from_x, mode,
                             m.up_fuse_y[std::size_t(l)]);
      hx = bx.decoder.level(l, fx, ex);
      hy = by.decoder.level(l, fy, ey);
    }
    return {bx.decoder.head(hx), by.decoder.head(hy)};
  }

  // SharedEncoder
  const Branch<S>& b = *m.x;
  const nn::Decoder<S>& dy = *m.shared_mask_decoder;
  auto emb = b.time(t);
  auto hx = b.encoder.stem(x_t);
  auto hy = b.encoder.stem((*m.mask_lift)(y_t));
  std::vector<Var<S>> skips_x, skips_y;
  for (int l = 0; l < depth; ++l) {
    hx = b.encoder.level(l, hx, emb);
    hy = b.encoder.level(l, hy, emb);
    skips_x.push_back(hx);
    skips_y.push_back(hy);
    hx = b.encoder.downsample(l, hx);
    hy = b.encoder.downsample(l, hy);
  }
  hx = b.mid.first(hx, emb);
  hy = b.mid.first(hy, emb);
  std::tie(hx, hy) = (*m.pair_attention)(hx, hy);
  hx = b.mid.second(hx, emb);
  hy = b.mid.second(hy, emb);
  for (int l = depth - 1; l >= 0; --l) {
    auto ux = b.decoder.upsample(l, hx);
    auto uy = dy.upsample(l, hy);
    const Var<S> from_y[] = {cross(uy)};
    const Var<S> from_x[] = {cross(ux)};
    auto fx = fuse_skip<S>(ops::concat_channels<S>({ux, skips_x[std::size_t(l)]}), from_y, mode,
                           m.up_fuse_x[std::size_t(l)]);
    auto fy = fuse_skip<S>(ops::concat_channels<S>({uy, skips_y[std::size_t(l)]}), from_x, mode,
                           m.up_fuse_y[std::size_t(l)]);
    hx = b.decoder.level(l, fx, emb);
    hy = dy.level(l, fy, emb);
  }
  return {b.decoder.head(hx), dy.head(hy)};
}

template <typename S>
Var<S> PairedGenerator<S>::predict_stacked(const Var<S>& state, std::span<const int> t,
                                           const GeneratorForwardOptions& options) const {
  if (state.shape().c != config_.state_channels())
    throw ShapeError("predict_stacked: expected " + std::to_string(config_.state_channels()) + " channels, got " +
                     state.shape().str());
  auto x = ops::slice_channels(state, 0, config_.image_channels);
  auto y = ops::slice_channels(state, config_.image_channels, config_.mask_channels);
  auto [ex, ey] = predict_noise(x, y, t, options);
  return ops::concat_channels<S>({ex, ey});
}

template struct FuseParams<float>;
template struct FuseParams<double>;
template Var<float> fuse_skip(const Var<float>&, std::span<const Var<float>>, SkipFusion, const FuseParams<float>&);
template Var<double> fuse_skip(const Var<double>&, std::span<const Var<double>>, SkipFusion,
                               const FuseParams<double>&);
template class PairedGenerator<float>;
template class PairedGenerator<double>;

}  // namespace pairdiff
