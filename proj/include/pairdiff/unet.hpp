#pragma once

// U-Net building blocks, exposed level by level so that two networks can be
// advanced in lockstep and exchange features between levels.

#include "pairdiff/layers.hpp"

#include <string>
#include <vector>

namespace pairdiff::nn {

struct UNetShape {
  int base_channels = 16;
  int depth = 2;
  int blocks_per_level = 2;
  int emb_dim = 64;
  /// Conditioning channels concatenated in front of every level (0 = none).
  int cond_channels = 0;
  /// Extra same-width feature maps fused in at each level by the caller.
  int cross_inputs = 0;

  int channels(int level) const { return base_channels << level; }
};

template <typename S>
struct Encoder {
  UNetShape shape;
  Conv2d<S> stem;
  std::vector<std::vector<ResBlock<S>>> levels;
  std::vector<Conv2d<S>> down;

  static Encoder make(ParamStore<S>& ps, const std::string& name, int in_channels, const UNetShape& shape) {
    Encoder e;
    e.shape = shape;
    e.stem = Conv2d<S>::make(ps, name + ".stem", in_channels, shape.channels(0), 3);
    for (int l = 0; l < shape.depth; ++l) {
      const int ch = shape.channels(l);
      std::vector<ResBlock<S>> blocks;
      for (int b = 0; b < shape.blocks_per_level; ++b) {
        const int cin = b == 0 ? ch + shape.cond_channels : ch;
        blocks.push_back(ResBlock<S>::make(ps, name + ".l" + std::to_string(l) + ".b" + std::to_string(b), cin, ch,
                                           shape.emb_dim));
      }
      e.levels.push_back(std::move(blocks));
      e.down.push_back(Conv2d<S>::make(ps, name + ".down" + std::to_string(l), ch * (1 + shape.cross_inputs),
                                       shape.channels(l + 1), 3, 2));
    }
    return e;
  }

  Var<S> level(int l, Var<S> h, const Var<S>& emb, const Var<S>& cond = {}) const {
    if (cond.defined()) h = ops::concat_channels<S>({h, cond});
    for (const auto& block : levels[std::size_t(l)]) h = block(h, emb);
    return h;
  }

  Var<S> downsample(int l, const Var<S>& h) const { return down[std::size_t(l)](h); }
};

template <typename S>
struct Bottleneck {
  ResBlock<S> first;
  ResBlock<S> second;

  static Bottleneck make(ParamStore<S>& ps, const std::string& name, int channels, int emb_dim) {
    return Bottleneck{ResBlock<S>::make(ps, name + ".first", channels, channels, emb_dim),
                      ResBlock<S>::make(ps, name + ".second", channels, channels, emb_dim)};
  }
};

template <typename S>
struct Decoder {
  UNetShape shape;
  std::vector<Conv2d<S>> up;
  std::vector<std::vector<ResBlock<S>>> levels;
  GroupNorm<S> out_norm;
  Conv2d<S> out;

  static Decoder make(ParamStore<S>& ps, const std::string& name, int out_channels, const UNetShape& shape) {
    Decoder d;
    d.shape = shape;
    for (int l = 0; l < shape.depth; ++l) {
      const int ch = shape.channels(l);
      d.up.push_back(Conv2d<S>::make(ps, name + ".up" + std::to_string(l), shape.channels(l + 1), ch, 3));
      std::vector<ResBlock<S>> blocks;
      for (int b = 0; b < shape.blocks_per_level; ++b) {
        const int cin = b == 0 ? ch * (2 + shape.cross_inputs) + shape.cond_channels : ch;
        blocks.push_back(ResBlock<S>::make(ps, name + ".l" + std::to_string(l) + ".b" + std::to_string(b), cin, ch,
                                           shape.emb_dim));
      }
      d.levels.push_back(std::move(blocks));
    }
    d.out_norm = GroupNorm<S>::make(ps, name + ".out_norm", shape.channels(0));
    d.out = Conv2d<S>::make(ps, name + ".out", shape.channels(0), out_channels, 3);
    return d;
  }

  Var<S> upsample(int l, const Var<S>& h) const { return up[std::size_t(l)](ops::upsample_nearest2x(h)); }

  Var<S> level(int l, Var<S> fused, const Var<S>& emb, const Var<S>& cond = {}) const {
    if (cond.defined()) fused = ops::concat_channels<S>({fused, cond});
    for (const auto& block : levels[std::size_t(l)]) fused = block(fused, emb);
    return fused;
  }

  Var<S> head(const Var<S>& h) const { return out(ops::silu(out_norm(h))); }
};

}  // namespace pairdiff::nn
