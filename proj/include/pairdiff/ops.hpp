#pragma once

// Differentiable tensor operations. Every op computes its value eagerly and
// records a backward closure when a parent requires a gradient.

#include "pairdiff/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <span>
#include <string>
#include <vector>

namespace pairdiff::ops {

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ShapeError(what);
}

template <typename S>
void same_shape(const Var<S>& a, const Var<S>& b, const char* op) {
  require(a.shape() == b.shape(),
          std::string(op) + ": shape mismatch " + a.shape().str() + " vs " + b.shape().str());
}

// b broadcasts over a when b is (1|N, 1, 1, 1|C).
template <typename S>
void broadcastable(const Shape& a, const Shape& b, const char* op) {
  require(b.h == 1 && b.w == 1 && (b.n == 1 || b.n == a.n) && (b.c == 1 || b.c == a.c),
          std::string(op) + ": cannot broadcast " + b.str() + " over " + a.str());
}

template <typename S>
S sigmoid(S x) {
  if (x >= S(0)) {
    const S e = std::exp(-x);
    return S(1) / (S(1) + e);
  }
  const S e = std::exp(x);
  return e / (S(1) + e);
}

}  // namespace detail

template <typename S>
Var<S> constant(Tensor<S> value) {
  return Var<S>(std::move(value), false);
}

template <typename S>
Var<S> add(const Var<S>& a, const Var<S>& b) {
  detail::same_shape(a, b, "add");
  Tensor<S> out = a.value();
  out.vec() += b.value().vec();
  return make_op<S>(std::move(out), {a, b}, [](Node<S>& self) {
    if (wants_grad(self, 0)) parent_grad(self, 0).vec() += self.grad.vec();
    if (wants_grad(self, 1)) parent_grad(self, 1).vec() += self.grad.vec();
  });
}

template <typename S>
Var<S> sub(const Var<S>& a, const Var<S>& b) {
  detail::same_shape(a, b, "sub");
  Tensor<S> out = a.value();
  out.vec() -= b.value().vec();
  return make_op<S>(std::move(out), {a, b}, [](Node<S>& self) {
    if (wants_grad(self, 0)) parent_grad(self, 0).vec() += self.grad.vec();
    if (wants_grad(self, 1)) parent_grad(self, 1).vec() -= self.grad.vec();
  });
}

template <typename S>
Var<S> mul(const Var<S>& a, const Var<S>& b) {
  detail::same_shape(a, b, "mul");
  Tensor<S> out = a.value();
  out.array() *= b.value().array();
  return make_op<S>(std::move(out), {a, b}, [](Node<S>& self) {
    if (wants_grad(self, 0)) parent_grad(self, 0).array() += self.grad.array() * parent_value(self, 1).array();
    if (wants_grad(self, 1)) parent_grad(self, 1).array() += self.grad.array() * parent_value(self, 0).array();
  });
}

template <typename S>
Var<S> scale(const Var<S>& a, S k) {
  Tensor<S> out = a.value();
  out.vec() *= k;
  return make_op<S>(std::move(out), {a}, [k](Node<S>& self) { parent_grad(self, 0).vec() += k * self.grad.vec(); });
}

template <typename S>
Var<S> add_scalar(const Var<S>& a, S k) {
  Tensor<S> out = a.value();
  out.array() += k;
  return make_op<S>(std::move(out), {a}, [](Node<S>& self) { parent_grad(self, 0).vec() += self.grad.vec(); });
}

/// a + b with b of shape (1|N, 1, 1, 1|C) broadcast over the batch/spatial/channel axes.
template <typename S>
Var<S> add_broadcast(const Var<S>& a, const Var<S>& b) {
  const Shape sa = a.shape();
  const Shape sb = b.shape();
  detail::broadcastable<S>(sa, sb, "add_broadcast");
  const int hw = sa.h * sa.w;
  Tensor<S> out = a.value();
  for (int n = 0; n < sa.n; ++n) {
    const int bn = sb.n == 1 ? 0 : n;
    for (int p = 0; p < hw; ++p) {
      S* o = out.data() + (std::size_t(n) * hw + p) * sa.c;
      const S* bv = b.value().data() + std::size_t(bn) * sb.c;
      if (sb.c == 1) {
        for (int c = 0; c < sa.c; ++c) o[c] += bv[0];
      } else {
        for (int c = 0; c < sa.c; ++c) o[c] += bv[c];
      }
    }
  }
  return make_op<S>(std::move(out), {a, b}, [sa, sb, hw](Node<S>& self) {
    if (wants_grad(self, 0)) parent_grad(self, 0).vec() += self.grad.vec();
    if (wants_grad(self, 1)) {
      Tensor<S>& gb = parent_grad(self, 1);
      for (int n = 0; n < sa.n; ++n) {
        const int bn = sb.n == 1 ? 0 : n;
        for (int p = 0; p < hw; ++p) {
          const S* g = self.grad.data() + (std::size_t(n) * hw + p) * sa.c;
          S* d = gb.data() + std::size_t(bn) * sb.c;
          if (sb.c == 1) {
            for (int c = 0; c < sa.c; ++c) d[0] += g[c];
          } else {
            for (int c = 0; c < sa.c; ++c) d[c] += g[c];
          }
        }
      }
    }
  });
}

/// a * b with b of shape (1|N, 1, 1, 1|C) broadcast.
template <typename S>
Var<S> mul_broadcast(const Var<S>& a, const Var<S>& b) {
  const Shape sa = a.shape();
  const Shape sb = b.shape();
  detail::broadcastable<S>(sa, sb, "mul_broadcast");
  const int hw = sa.h * sa.w;
  Tensor<S> out = a.value();
  for (int n = 0; n < sa.n; ++n) {
    const int bn = sb.n == 1 ? 0 : n;
    const S* bv = b.value().data() + std::size_t(bn) * sb.c;
    for (int p = 0; p < hw; ++p) {
      S* o = out.data() + (std::size_t(n) * hw + p) * sa.c;
      for (int c = 0; c < sa.c; ++c) o[c] *= bv[sb.c == 1 ? 0 : c];
    }
  }
  return make_op<S>(std::move(out), {a, b}, [sa, sb, hw](Node<S>& self) {
    const Tensor<S>& av = parent_value(self, 0);
    const Tensor<S>& bvt = parent_value(self, 1);
    for (int n = 0; n < sa.n; ++n) {
      const int bn = sb.n == 1 ? 0 : n;
      const S* bv = bvt.data() + std::size_t(bn) * sb.c;
      for (int p = 0; p < hw; ++p) {
        const std::size_t base = (std::size_t(n) * hw + p) * sa.c;
        const S* g = self.grad.data() + base;
        if (wants_grad(self, 0)) {
          S* d = parent_grad(self, 0).data() + base;
          for (int c = 0; c < sa.c; ++c) d[c] += g[c] * bv[sb.c == 1 ? 0 : c];
        }
        if (wants_grad(self, 1)) {
          S* d = parent_grad(self, 1).data() + std::size_t(bn) * sb.c;
          const S* x = av.data() + base;
          for (int c = 0; c < sa.c; ++c) d[sb.c == 1 ? 0 : c] += g[c] * x[c];
        }
      }
    }
  });
}

template <typename S>
Var<S> silu(const Var<S>& a) {
  Tensor<S> out = a.value();
  for (auto& v : out.vec()) v = v * detail::sigmoid(v);
  return make_op<S>(std::move(out), {a}, [](Node<S>& self) {
    const auto& x = parent_value(self, 0).vec();
    auto& g = parent_grad(self, 0).vec();
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      const S s = detail::sigmoid(x[i]);
      g[i] += self.grad.vec()[i] * s * (S(1) + x[i] * (S(1) - s));
    }
  });
}

template <typename S>
Var<S> relu(const Var<S>& a) {
  Tensor<S> out = a.value();
  out.array() = out.array().max(S(0));
  return make_op<S>(std::move(out), {a}, [](Node<S>& self) {
    parent_grad(self, 0).array() +=
        (parent_value(self, 0).array() > S(0)).template cast<S>() * self.grad.array();
  });
}

template <typename S>
Var<S> sigmoid(const Var<S>& a) {
  Tensor<S> out = a.value();
  for (auto& v : out.vec()) v = detail::sigmoid(v);
  return make_op<S>(std::move(out), {a}, [](Node<S>& self) {
    parent_grad(self, 0).array() += self.grad.array() * self.value.array() * (S(1) - self.value.array());
  });
}

template <typename S>
Var<S> concat_channels(const std::vector<Var<S>>& items) {
  detail::require(!items.empty(), "concat_channels: no inputs");
  std::vector<Tensor<S>> values;
  values.reserve(items.size());
  for (const auto& v : items) values.push_back(v.value());
  Tensor<S> out = Tensor<S>::concat_channels(values);
  std::vector<int> widths;
  for (const auto& v : items) widths.push_back(v.shape().c);
  return make_op<S>(std::move(out), items, [widths](Node<S>& self) {
    int offset = 0;
    for (std::size_t i = 0; i < widths.size(); ++i) {
      if (wants_grad(self, i)) parent_grad(self, i).mat() += self.grad.mat().middleCols(offset, widths[i]);
      offset += widths[i];
    }
  });
}

template <typename S>
Var<S> slice_channels(const Var<S>& a, int begin, int count) {
  Tensor<S> out = a.value().channels(begin, count);
  return make_op<S>(std::move(out), {a}, [begin, count](Node<S>& self) {
    parent_grad(self, 0).mat().middleCols(begin, count) += self.grad.mat();
  });
}

/// 2-D convolution over NHWC input. `weight` has shape (k, k, Cin, Cout) so its
/// data is the row-major (k*k*Cin x Cout) matrix matched by the im2col layout.
/// `bias` has shape (1, 1, 1, Cout).
template <typename S>
Var<S> conv2d(const Var<S>& x, const Var<S>& weight, const Var<S>& bias, int stride, int pad) {
  const Shape sx = x.shape();
  const Shape sw = weight.shape();
  const int k = sw.n;
  detail::require(sw.h == k && sw.w == sx.c,
                  "conv2d: weight " + sw.str() + " incompatible with input " + sx.str());
  detail::require(bias.shape() == Shape{1, 1, 1, sw.c}, "conv2d: bias shape " + bias.shape().str());
  const int ho = (sx.h + 2 * pad - k) / stride + 1;
  const int wo = (sx.w + 2 * pad - k) / stride + 1;
  detail::require(ho > 0 && wo > 0, "conv2d: output would be empty for input " + sx.str());
  const Shape so{sx.n, ho, wo, sw.c};
  const int cin = sx.c;
  const int kk = k * k * cin;
  using RowMatrix = typename Tensor<S>::RowMatrix;
  using ConstMap = Eigen::Map<const RowMatrix>;
  const ConstMap wmat(weight.value().data(), kk, sw.c);

  Tensor<S> out(so);
  const bool pointwise = (k == 1 && stride == 1 && pad == 0);
  RowMatrix cols;
  if (pointwise) {
    out.mat().noalias() = x.value().mat() * wmat;
  } else {
    cols = RowMatrix::Zero(so.pixels(), kk);
    for (int n = 0; n < sx.n; ++n) {
      for (int oy = 0; oy < ho; ++oy) {
        for (int ox = 0; ox < wo; ++ox) {
          S* row = cols.data() + (std::size_t(n * ho + oy) * wo + ox) * kk;
          for (int ky = 0; ky < k; ++ky) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= sx.h) continue;
            for (int kx = 0; kx < k; ++kx) {
              const int ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= sx.w) continue;
              std::copy_n(x.value().data() + x.value().index(n, iy, ix, 0), cin, row + (ky * k + kx) * cin);
            }
          }
        }
      }
    }
    out.mat().noalias() = cols * wmat;
  }
  out.mat().rowwise() += Eigen::Map<const Eigen::Matrix<S, 1, Eigen::Dynamic>>(bias.value().data(), sw.c);

  return make_op<S>(std::move(out), {x, weight, bias},
                    [cols = std::move(cols), pointwise, sx, so, k, stride, pad, kk](Node<S>& self) {
                      const auto g = self.grad.mat();
                      const Tensor<S>& wv = parent_value(self, 1);
                      const ConstMap w(wv.data(), kk, so.c);
                      if (wants_grad(self, 1)) {
                        auto gw = Eigen::Map<RowMatrix>(parent_grad(self, 1).data(), kk, so.c);
                        if (pointwise) {
                          gw.noalias() += parent_value(self, 0).mat().transpose() * g;
                        } else {
                          gw.noalias() += cols.transpose() * g;
                        }
                      }
                      if (wants_grad(self, 2)) parent_grad(self, 2).mat() += g.colwise().sum();
                      if (!wants_grad(self, 0)) return;
                      Tensor<S>& gx = parent_grad(self, 0);
                      if (pointwise) {
                        gx.mat().noalias() += g * w.transpose();
                        return;
                      }
                      RowMatrix gcols = g * w.transpose();
                      const int cin = sx.c;
                      for (int n = 0; n < sx.n; ++n) {
                        for (int oy = 0; oy < so.h; ++oy) {
                          for (int ox = 0; ox < so.w; ++ox) {
                            const S* row = gcols.data() + (std::size_t(n * so.h + oy) * so.w + ox) * kk;
                            for (int ky = 0; ky < k; ++ky) {
                              const int iy = oy * stride - pad + ky;
                              if (iy < 0 || iy >= sx.h) continue;
                              for (int kx = 0; kx < k; ++kx) {
                                const int ix = ox * stride - pad + kx;
                                if (ix < 0 || ix >= sx.w) continue;
                                S* dst = gx.data() + gx.index(n, iy, ix, 0);
                                const S* src = row + (ky * k + kx) * cin;
                                for (int c = 0; c < cin; ++c) dst[c] += src[c];
                              }
                            }
                          }
                        }
                      }
                    });
}

template <typename S>
Var<S> upsample_nearest2x(const Var<S>& x) {
  const Shape sx = x.shape();
  Tensor<S> out(Shape{sx.n, sx.h * 2, sx.w * 2, sx.c});
  for (int n = 0; n < sx.n; ++n)
    for (int y = 0; y < sx.h * 2; ++y)
      for (int xx = 0; xx < sx.w * 2; ++xx)
        std::copy_n(x.value().data() + x.value().index(n, y / 2, xx / 2, 0), sx.c,
                    out.data() + out.index(n, y, xx, 0));
  return make_op<S>(std::move(out), {x}, [sx](Node<S>& self) {
    Tensor<S>& gx = parent_grad(self, 0);
    for (int n = 0; n < sx.n; ++n)
      for (int y = 0; y < sx.h * 2; ++y)
        for (int xx = 0; xx < sx.w * 2; ++xx) {
          const S* g = self.grad.data() + self.grad.index(n, y, xx, 0);
          S* d = gx.data() + gx.index(n, y / 2, xx / 2, 0);
          for (int c = 0; c < sx.c; ++c) d[c] += g[c];
        }
  });
}

/// Group normalization with per-channel affine parameters of shape (1, 1, 1, C).
template <typename S>
Var<S> group_norm(const Var<S>& x, const Var<S>& gamma, const Var<S>& beta, int groups, S eps = S(1e-5)) {
  const Shape sx = x.shape();
  detail::require(groups > 0 && sx.c % groups == 0, "group_norm: channels not divisible by groups");
  detail::require(gamma.shape() == Shape{1, 1, 1, sx.c} && beta.shape() == Shape{1, 1, 1, sx.c},
                  "group_norm: affine parameter shape");
  const int hw = sx.h * sx.w;
  const int cg = sx.c / groups;
  const S count = S(hw * cg);
  Tensor<S> xhat(sx);
  std::vector<S> rstd(std::size_t(sx.n) * groups);
  Tensor<S> out(sx);
  const S* xv = x.value().data();
  const S* gm = gamma.value().data();
  const S* bt = beta.value().data();
  for (int n = 0; n < sx.n; ++n) {
    for (int g = 0; g < groups; ++g) {
      S mean = 0;
      for (int p = 0; p < hw; ++p)
        for (int c = g * cg; c < (g + 1) * cg; ++c) mean += xv[(std::size_t(n) * hw + p) * sx.c + c];
      mean /= count;
      S var = 0;
      for (int p = 0; p < hw; ++p)
        for (int c = g * cg; c < (g + 1) * cg; ++c) {
          const S d = xv[(std::size_t(n) * hw + p) * sx.c + c] - mean;
          var += d * d;
        }
      var /= count;
      const S r = S(1) / std::sqrt(var + eps);
      rstd[std::size_t(n) * groups + g] = r;
      for (int p = 0; p < hw; ++p)
        for (int c = g * cg; c < (g + 1) * cg; ++c) {
          const std::size_t i = (std::size_t(n) * hw + p) * sx.c + c;
          xhat.data()[i] = (xv[i] - mean) * r;
          out.data()[i] = xhat.data()[i] * gm[c] + bt[c];
        }
    }
  }
  return make_op<S>(std::move(out), {x, gamma, beta},
                    [xhat = std::move(xhat), rstd = std::move(rstd), sx, groups, hw, cg, count](Node<S>& self) {
                      const S* g = self.grad.data();
                      const S* xh = xhat.data();
                      const S* gm = parent_value(self, 1).data();
                      if (wants_grad(self, 1) || wants_grad(self, 2)) {
                        S* dg = wants_grad(self, 1) ? parent_grad(self, 1).data() : nullptr;
                        S* db = wants_grad(self, 2) ? parent_grad(self, 2).data() : nullptr;
                        for (std::size_t i = 0; i < sx.size(); ++i) {
                          const int c = int(i % sx.c);
                          if (dg) dg[c] += g[i] * xh[i];
                          if (db) db[c] += g[i];
                        }
                      }
                      if (!wants_grad(self, 0)) return;
                      S* dx = parent_grad(self, 0).data();
                      for (int n = 0; n < sx.n; ++n) {
                        for (int grp = 0; grp < groups; ++grp) {
                          S sum_d = 0;
                          S sum_dx = 0;
                          for (int p = 0; p < hw; ++p)
                            for (int c = grp * cg; c < (grp + 1) * cg; ++c) {
                              const std::size_t i = (std::size_t(n) * hw + p) * sx.c + c;
                              const S d = g[i] * gm[c];
                              sum_d += d;
                              sum_dx += d * xh[i];
                            }
                          const S r = rstd[std::size_t(n) * groups + grp];
                          for (int p = 0; p < hw; ++p)
                            for (int c = grp * cg; c < (grp + 1) * cg; ++c) {
                              const std::size_t i = (std::size_t(n) * hw + p) * sx.c + c;
                              const S d = g[i] * gm[c];
                              dx[i] += r / count * (count * d - sum_d - xh[i] * sum_dx);
                            }
                        }
                      }
                    });
}

/// Mean over the spatial axes: (N, H, W, C) -> (N, 1, 1, C).
template <typename S>
Var<S> global_avg_pool(const Var<S>& x) {
  const Shape sx = x.shape();
  const int hw = sx.h * sx.w;
  Tensor<S> out(Shape{sx.n, 1, 1, sx.c});
  for (int n = 0; n < sx.n; ++n)
    out.mat().row(n) = x.value().mat().middleRows(n * hw, hw).colwise().mean();
  return make_op<S>(std::move(out), {x}, [sx, hw](Node<S>& self) {
    auto gx = parent_grad(self, 0).mat();
    for (int n = 0; n < sx.n; ++n)
      gx.middleRows(n * hw, hw).rowwise() += self.grad.mat().row(n) / S(hw);
  });
}

namespace detail {

template <typename S>
using RowMatrix = typename Tensor<S>::RowMatrix;

template <typename S>
void softmax_rows(RowMatrix<S>& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    const S mx = m.row(r).maxCoeff();
    m.row(r) = (m.row(r).array() - mx).exp();
    m.row(r) /= m.row(r).sum();
  }
}

/// Scaled dot-product attention probabilities for batch element n and head h.
template <typename S>
RowMatrix<S> attention_probs(const Tensor<S>& q, const Tensor<S>& k, int n, int head, int heads) {
  const int d = q.c() / heads;
  const int lq = q.h() * q.w();
  const int lk = k.h() * k.w();
  const auto qm = q.mat().block(n * lq, head * d, lq, d);
  const auto km = k.mat().block(n * lk, head * d, lk, d);
  RowMatrix<S> p = (qm * km.transpose()) / std::sqrt(S(d));
  softmax_rows<S>(p);
  return p;
}

}  // namespace detail

/// Multi-head scaled dot-product attention over spatial tokens. `q` supplies
/// queries (N, Hq, Wq, C); `k` and `v` supply keys/values (N, Hk, Wk, C).
template <typename S>
Var<S> attention(const Var<S>& q, const Var<S>& k, const Var<S>& v, int heads) {
  const Shape sq = q.shape();
  const Shape sk = k.shape();
  detail::require(heads > 0 && sq.c % heads == 0, "attention: channels not divisible by heads");
  detail::require(sk == v.shape() && sk.n == sq.n && sk.c == sq.c, "attention: q/k/v shape mismatch");
  const int d = sq.c / heads;
  const int lq = sq.h * sq.w;
  const int lk = sk.h * sk.w;
  std::vector<detail::RowMatrix<S>> probs;
  probs.reserve(std::size_t(sq.n) * heads);
  Tensor<S> out(sq);
  for (int n = 0; n < sq.n; ++n)
    for (int h = 0; h < heads; ++h) {
      probs.push_back(detail::attention_probs(q.value(), k.value(), n, h, heads));
      out.mat().block(n * lq, h * d, lq, d).noalias() =
          probs.back() * v.value().mat().block(n * lk, h * d, lk, d);
    }
  return make_op<S>(std::move(out), {q, k, v}, [probs = std::move(probs), sq, heads, d, lq, lk](Node<S>& self) {
    const S inv = S(1) / std::sqrt(S(d));
    const auto& qv = parent_value(self, 0);
    const auto& kv = parent_value(self, 1);
    const auto& vv = parent_value(self, 2);
    for (int n = 0; n < sq.n; ++n)
      for (int h = 0; h < heads; ++h) {
        const auto& p = probs[std::size_t(n) * heads + h];
        const auto go = self.grad.mat().block(n * lq, h * d, lq, d);
        const auto vm = vv.mat().block(n * lk, h * d, lk, d);
        if (wants_grad(self, 2)) parent_grad(self, 2).mat().block(n * lk, h * d, lk, d).noalias() += p.transpose() * go;
        if (!wants_grad(self, 0) && !wants_grad(self, 1)) continue;
        detail::RowMatrix<S> dp = go * vm.transpose();
        const Eigen::Matrix<S, Eigen::Dynamic, 1> rowdot = (dp.array() * p.array()).rowwise().sum();
        detail::RowMatrix<S> ds = (p.array() * (dp.colwise() - rowdot).array()).matrix() * inv;
        if (wants_grad(self, 0))
          parent_grad(self, 0).mat().block(n * lq, h * d, lq, d).noalias() +=
              ds * kv.mat().block(n * lk, h * d, lk, d);
        if (wants_grad(self, 1))
          parent_grad(self, 1).mat().block(n * lk, h * d, lk, d).noalias() +=
              ds.transpose() * qv.mat().block(n * lq, h * d, lq, d);
      }
  });
}

template <typename S>
Var<S> sum(const Var<S>& a) {
  return make_op<S>(Tensor<S>::scalar(a.value().vec().sum()), {a},
                    [](Node<S>& self) { parent_grad(self, 0).array() += self.grad.item(); });
}

template <typename S>
Var<S> mean(const Var<S>& a) {
  const S count = S(a.value().size());
  return make_op<S>(Tensor<S>::scalar(a.value().vec().mean()), {a},
                    [count](Node<S>& self) { parent_grad(self, 0).array() += self.grad.item() / count; });
}

/// mean((a - b)^2)
template <typename S>
Var<S> mse(const Var<S>& a, const Var<S>& b) {
  detail::same_shape(a, b, "mse");
  const S count = S(a.value().size());
  const S loss = (a.value().vec() - b.value().vec()).squaredNorm() / count;
  return make_op<S>(Tensor<S>::scalar(loss), {a, b}, [count](Node<S>& self) {
    const S k = S(2) * self.grad.item() / count;
    const auto diff = (parent_value(self, 0).vec() - parent_value(self, 1).vec()).eval();
    if (wants_grad(self, 0)) parent_grad(self, 0).vec() += k * diff;
    if (wants_grad(self, 1)) parent_grad(self, 1).vec() -= k * diff;
  });
}

/// Binary cross-entropy on probabilities strictly inside (0, 1) against a
/// constant target, averaged over all elements.
template <typename S>
Var<S> bce(const Var<S>& prob, const Tensor<S>& target) {
  detail::require(prob.shape() == target.shape(), "bce: shape mismatch");
  detail::require(prob.value().size() > 0, "bce: empty input");
  const S count = S(prob.value().size());
  S loss = 0;
  for (Eigen::Index i = 0; i < prob.value().vec().size(); ++i) {
    const S p = prob.value().vec()[i];
    const S y = target.vec()[i];
    loss -= y * std::log(p) + (S(1) - y) * std::log(S(1) - p);
  }
  return make_op<S>(Tensor<S>::scalar(loss / count), {prob}, [target, count](Node<S>& self) {
    const auto& p = parent_value(self, 0).vec();
    auto& g = parent_grad(self, 0).vec();
    for (Eigen::Index i = 0; i < p.size(); ++i) {
      const S y = target.vec()[i];
      g[i] += self.grad.item() * (-(y / p[i]) + (S(1) - y) / (S(1) - p[i])) / count;
    }
  });
}

/// Numerically stable binary cross-entropy on logits, averaged.
template <typename S>
Var<S> bce_with_logits(const Var<S>& logits, const Tensor<S>& target) {
  detail::require(logits.shape() == target.shape(), "bce_with_logits: shape mismatch");
  const S count = S(logits.value().size());
  S loss = 0;
  for (Eigen::Index i = 0; i < logits.value().vec().size(); ++i) {
    const S z = logits.value().vec()[i];
    loss += std::max(z, S(0)) - z * target.vec()[i] + std::log1p(std::exp(-std::abs(z)));
  }
  return make_op<S>(Tensor<S>::scalar(loss / count), {logits}, [target, count](Node<S>& self) {
    const auto& z = parent_value(self, 0).vec();
    auto& g = parent_grad(self, 0).vec();
    for (Eigen::Index i = 0; i < z.size(); ++i)
      g[i] += self.grad.item() * (detail::sigmoid(z[i]) - target.vec()[i]) / count;
  });
}

/// 1 - mean over the batch of the smoothed soft Dice coefficient
/// (2 sum(p g) + s) / (sum(p) + sum(g) + s).
template <typename S>
Var<S> dice_loss(const Var<S>& prob, const Tensor<S>& target, S smooth = S(1)) {
  detail::require(prob.shape() == target.shape(), "dice_loss: shape mismatch");
  const Shape sp = prob.shape();
  const std::size_t per = std::size_t(sp.h) * sp.w * sp.c;
  std::vector<S> inter(sp.n), denom(sp.n);
  S total = 0;
  for (int n = 0; n < sp.n; ++n) {
    const auto p = prob.value().vec().segment(Eigen::Index(n * per), Eigen::Index(per));
    const auto g = target.vec().segment(Eigen::Index(n * per), Eigen::Index(per));
    inter[n] = p.dot(g);
    denom[n] = p.sum() + g.sum();
    total += (S(2) * inter[n] + smooth) / (denom[n] + smooth);
  }
  const S loss = S(1) - total / S(sp.n);
  return make_op<S>(Tensor<S>::scalar(loss), {prob},
                    [target, inter = std::move(inter), denom = std::move(denom), smooth, sp, per](Node<S>& self) {
                      auto& gp = parent_grad(self, 0).vec();
                      const S k = -self.grad.item() / S(sp.n);
                      for (int n = 0; n < sp.n; ++n) {
                        const S u = denom[n] + smooth;
                        const S num = S(2) * inter[n] + smooth;
                        for (std::size_t i = 0; i < per; ++i) {
                          const Eigen::Index j = Eigen::Index(n * per + i);
                          gp[j] += k * (S(2) * target.vec()[j] * u - num) / (u * u);
                        }
                      }
                    });
}

/// Per-sample scaling (N,1,1,1) built from a plain coefficient list.
template <typename S>
Var<S> per_sample(std::span<const S> coefficients) {
  Tensor<S> t(Shape{int(coefficients.size()), 1, 1, 1});
  for (std::size_t i = 0; i < coefficients.size(); ++i) t.vec()[Eigen::Index(i)] = coefficients[i];
  return constant(std::move(t));
}

}  // namespace pairdiff::ops
