#pragma once

#include "pairdiff/ops.hpp"
#include "pairdiff/params.hpp"

#include <cmath>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace pairdiff::nn {

/// Number of normalization groups for `channels`: the largest divisor not
/// exceeding min(32, channels / 4), so every group spans at least 4 channels
/// when possible.
inline int norm_groups(int channels) {
  int g = std::min(32, std::max(1, channels / 4));
  while (channels % g != 0) --g;
  return g;
}

template <typename S>
struct Conv2d {
  Var<S> weight;
  Var<S> bias;
  int stride = 1;
  int pad = 0;

  static Conv2d make(ParamStore<S>& ps, const std::string& name, int cin, int cout, int k, int stride = 1,
                     Init init = Init::kUniformFanIn) {
    Conv2d conv;
    conv.weight = ps.add(name + ".weight", Shape{k, k, cin, cout}, init, k * k * cin);
    conv.bias = ps.add(name + ".bias", Shape{1, 1, 1, cout}, init == Init::kUniformFanIn ? Init::kZeros : init);
    conv.stride = stride;
    conv.pad = k / 2;
    return conv;
  }

  int in_channels() const { return weight.shape().w; }
  int out_channels() const { return weight.shape().c; }

  Var<S> operator()(const Var<S>& x) const { return ops::conv2d(x, weight, bias, stride, pad); }
};

/// Dense layer on (N, 1, 1, C) tensors.
template <typename S>
using Linear = Conv2d<S>;

template <typename S>
Linear<S> make_linear(ParamStore<S>& ps, const std::string& name, int cin, int cout) {
  return Conv2d<S>::make(ps, name, cin, cout, 1);
}

template <typename S>
struct GroupNorm {
  Var<S> gamma;
  Var<S> beta;
  int groups = 1;

  static GroupNorm make(ParamStore<S>& ps, const std::string& name, int channels) {
    GroupNorm gn;
    gn.gamma = ps.add(name + ".gamma", Shape{1, 1, 1, channels}, Init::kOnes);
    gn.beta = ps.add(name + ".beta", Shape{1, 1, 1, channels}, Init::kZeros);
    gn.groups = norm_groups(channels);
    return gn;
  }

  Var<S> operator()(const Var<S>& x) const { return ops::group_norm(x, gamma, beta, groups); }
};

/// Sinusoidal features of integer timesteps, shape (N, 1, 1, dim).
template <typename S>
Tensor<S> sinusoidal_embedding(std::span<const int> t, int dim) {
  Tensor<S> out(Shape{int(t.size()), 1, 1, dim});
  const int half = dim / 2;
  for (std::size_t n = 0; n < t.size(); ++n) {
    for (int i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(10000.0) * double(i) / double(std::max(half - 1, 1)));
      const double arg = double(t[n]) * freq;
      out(int(n), 0, 0, i) = S(std::sin(arg));
      out(int(n), 0, 0, half + i) = S(std::cos(arg));
    }
  }
  return out;
}

/// Sinusoidal features followed by a two-layer MLP.
template <typename S>
struct TimeEmbedding {
  int feature_dim = 0;
  Linear<S> fc1;
  Linear<S> fc2;

  static TimeEmbedding make(ParamStore<S>& ps, const std::string& name, int feature_dim, int out_dim) {
    TimeEmbedding te;
    te.feature_dim = feature_dim;
    te.fc1 = make_linear(ps, name + ".fc1", feature_dim, out_dim);
    te.fc2 = make_linear(ps, name + ".fc2", out_dim, out_dim);
    return te;
  }

  int out_dim() const { return fc2.out_channels(); }

  Var<S> operator()(std::span<const int> t) const {
    auto features = ops::constant(sinusoidal_embedding<S>(t, feature_dim));
    return fc2(ops::silu(fc1(features)));
  }
};

/// GroupNorm-SiLU-Conv twice, with the time embedding added in between and a
/// residual shortcut (1x1 when the width changes).
template <typename S>
struct ResBlock {
  GroupNorm<S> norm1;
  Conv2d<S> conv1;
  Linear<S> time_proj;
  GroupNorm<S> norm2;
  Conv2d<S> conv2;
  std::optional<Conv2d<S>> shortcut;

  static ResBlock make(ParamStore<S>& ps, const std::string& name, int cin, int cout, int emb_dim) {
    ResBlock b;
    b.norm1 = GroupNorm<S>::make(ps, name + ".norm1", cin);
    b.conv1 = Conv2d<S>::make(ps, name + ".conv1", cin, cout, 3);
    b.time_proj = make_linear(ps, name + ".time", emb_dim, cout);
    b.norm2 = GroupNorm<S>::make(ps, name + ".norm2", cout);
    b.conv2 = Conv2d<S>::make(ps, name + ".conv2", cout, cout, 3);
    if (cin != cout) b.shortcut = Conv2d<S>::make(ps, name + ".shortcut", cin, cout, 1);
    return b;
  }

  Var<S> operator()(const Var<S>& x, const Var<S>& emb) const {
    auto h = conv1(ops::silu(norm1(x)));
    h = ops::add_broadcast(h, time_proj(ops::silu(emb)));
    h = conv2(ops::silu(norm2(h)));
    return ops::add(h, shortcut ? (*shortcut)(x) : x);
  }
};

/// Multi-head attention with 1x1 projections; queries from one feature map,
/// keys and values from another (the same one for self-attention).
template <typename S>
struct Attention {
  Conv2d<S> q;
  Conv2d<S> k;
  Conv2d<S> v;
  Conv2d<S> out;
  int heads = 1;

  static Attention make(ParamStore<S>& ps, const std::string& name, int channels, int heads) {
    if (heads <= 0 || channels % heads != 0)
      throw std::invalid_argument("attention: " + std::to_string(channels) + " channels not divisible by " +
                                  std::to_string(heads) + " heads");
    Attention a;
    a.q = Conv2d<S>::make(ps, name + ".q", channels, channels, 1);
    a.k = Conv2d<S>::make(ps, name + ".k", channels, channels, 1);
    a.v = Conv2d<S>::make(ps, name + ".v", channels, channels, 1);
    a.out = Conv2d<S>::make(ps, name + ".out", channels, channels, 1);
    a.heads = heads;
    return a;
  }

  Var<S> operator()(const Var<S>& query_src, const Var<S>& kv_src) const {
    return out(ops::attention(q(query_src), k(kv_src), v(kv_src), heads));
  }
};

/// Self-attention on each branch followed by cross-attention between them,
/// both with residual connections. One set of weights serves both branches.
template <typename S>
struct PairAttention {
  Attention<S> self_attn;
  Attention<S> cross_attn;

  static PairAttention make(ParamStore<S>& ps, const std::string& name, int channels, int heads) {
    return PairAttention{Attention<S>::make(ps, name + ".self", channels, heads),
                         Attention<S>::make(ps, name + ".cross", channels, heads)};
  }

  std::pair<Var<S>, Var<S>> operator()(const Var<S>& x, const Var<S>& y) const {
    if (!(x.shape() == y.shape()))
      throw ShapeError("cross_attention: branch shapes differ " + x.shape().str() + " vs " + y.shape().str());
    auto x1 = ops::add(x, self_attn(x, x));
    auto y1 = ops::add(y, self_attn(y, y));
    auto x2 = ops::add(x1, cross_attn(x1, y1));
    auto y2 = ops::add(y1, cross_attn(y1, x1));
    return {x2, y2};
  }
};

}  // namespace pairdiff::nn
