#pragma once

#include "pairdiff/ops.hpp"
#include "pairdiff/rng.hpp"

#include <Eigen/Core>

#include <cmath>
#include <functional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace pairdiff {

/// Linear beta schedule and its derived products. Timesteps are 1-based
/// externally; alpha_bar(0) is 1 by convention.
struct NoiseSchedule {
  int T = 0;
  Eigen::VectorXd betas;
  Eigen::VectorXd alphas;
  Eigen::VectorXd alpha_bars;

  void check_t(int t, const char* op) const {
    if (t < 1 || t > T)
      throw std::out_of_range(std::string(op) + ": timestep " + std::to_string(t) + " outside [1, " +
                              std::to_string(T) + "]");
  }
  double beta(int t) const { return betas[t - 1]; }
  double alpha(int t) const { return alphas[t - 1]; }
  double alpha_bar(int t) const { return t == 0 ? 1.0 : alpha_bars[t - 1]; }
};

NoiseSchedule make_linear_schedule(int T, double beta_start = 1e-4, double beta_end = 0.02);

enum class PosteriorVariance { kBeta, kBetaTilde };
enum class SamplerMode { kDdpm, kDdim };

SamplerMode parse_sampler_mode(const std::string& text);
std::string to_string(SamplerMode mode);

namespace detail {
template <typename S>
void check_same(const Tensor<S>& a, const Tensor<S>& b, const char* op) {
  if (!(a.shape() == b.shape()))
    throw ShapeError(std::string(op) + ": shape mismatch " + a.shape().str() + " vs " + b.shape().str());
}
}  // namespace detail

/// One step of the Markov corruption chain:
/// sqrt(1 - beta_t) x_{t-1} + sqrt(beta_t) noise.
template <typename S>
Tensor<S> forward_diffuse_step(const Tensor<S>& x_prev, int t, const Tensor<S>& noise, const NoiseSchedule& sched) {
  detail::check_same(x_prev, noise, "forward_diffuse_step");
  sched.check_t(t, "forward_diffuse_step");
  Tensor<S> out(x_prev.shape());
  out.vec() = S(std::sqrt(1.0 - sched.beta(t))) * x_prev.vec() + S(std::sqrt(sched.beta(t))) * noise.vec();
  return out;
}

/// Closed-form marginal: sqrt(abar_t) x0 + sqrt(1 - abar_t) noise.
template <typename S>
Tensor<S> forward_diffuse(const Tensor<S>& x0, int t, const Tensor<S>& noise, const NoiseSchedule& sched) {
  detail::check_same(x0, noise, "forward_diffuse");
  sched.check_t(t, "forward_diffuse");
  const double ab = sched.alpha_bar(t);
  Tensor<S> out(x0.shape());
  out.vec() = S(std::sqrt(ab)) * x0.vec() + S(std::sqrt(1.0 - ab)) * noise.vec();
  return out;
}

/// Batched closed-form marginal with one timestep per batch element. A
/// timestep of 0 returns x0 unchanged.
template <typename S>
Tensor<S> forward_diffuse(const Tensor<S>& x0, std::span<const int> t, const Tensor<S>& noise,
                          const NoiseSchedule& sched) {
  detail::check_same(x0, noise, "forward_diffuse");
  if (int(t.size()) != x0.n()) throw ShapeError("forward_diffuse: one timestep per batch element required");
  Tensor<S> out(x0.shape());
  const Eigen::Index per = Eigen::Index(x0.size() / std::size_t(x0.n()));
  for (int n = 0; n < x0.n(); ++n) {
    if (t[n] != 0) sched.check_t(t[n], "forward_diffuse");
    const double ab = sched.alpha_bar(t[n]);
    out.vec().segment(n * per, per) =
        S(std::sqrt(ab)) * x0.vec().segment(n * per, per) + S(std::sqrt(1.0 - ab)) * noise.vec().segment(n * per, per);
  }
  return out;
}

namespace detail {
/// Clean-sample estimate implied by eps_pred at step t, optionally clamped to [-1, 1].
template <typename S>
Eigen::Matrix<S, Eigen::Dynamic, 1> predict_x0(const Tensor<S>& eps_pred, const Tensor<S>& x_t, double ab_t, bool clip) {
  Eigen::Matrix<S, Eigen::Dynamic, 1> x0 =
      (x_t.vec() - S(std::sqrt(1.0 - ab_t)) * eps_pred.vec()) / S(std::sqrt(ab_t));
  if (clip) x0 = x0.cwiseMax(S(-1)).cwiseMin(S(1));
  return x0;
}
}  // namespace detail

/// Ancestral step from t to t_prev < t. With t_prev = t - 1 this is the
/// standard DDPM update; larger gaps use the respaced alpha = abar_t / abar_prev.
/// With clip_x0 the mean is formed from the clamped clean-sample estimate;
/// without it the result equals the noise-parameterized update.
template <typename S>
Tensor<S> ddpm_reverse_jump(const Tensor<S>& eps_pred, const Tensor<S>& x_t, int t, int t_prev,
                            const Tensor<S>& fresh_noise, const NoiseSchedule& sched,
                            PosteriorVariance variance = PosteriorVariance::kBeta, bool clip_x0 = false) {
  detail::check_same(eps_pred, x_t, "ddpm_reverse_step");
  sched.check_t(t, "ddpm_reverse_step");
  if (t_prev < 0 || t_prev >= t) throw std::invalid_argument("ddpm_reverse_step: t_prev must lie in [0, t)");
  const double ab_t = sched.alpha_bar(t);
  const double ab_prev = sched.alpha_bar(t_prev);
  const double alpha = ab_t / ab_prev;
  const double beta = 1.0 - alpha;
  Tensor<S> out(x_t.shape());
  if (clip_x0) {
    const auto x0 = detail::predict_x0(eps_pred, x_t, ab_t, true);
    out.vec() = S(std::sqrt(ab_prev) * beta / (1.0 - ab_t)) * x0 +
                S(std::sqrt(alpha) * (1.0 - ab_prev) / (1.0 - ab_t)) * x_t.vec();
  } else {
    out.vec() = S(1.0 / std::sqrt(alpha)) * (x_t.vec() - S(beta / std::sqrt(1.0 - ab_t)) * eps_pred.vec());
  }
  if (t_prev > 0) {
    detail::check_same(fresh_noise, x_t, "ddpm_reverse_step");
    const double var = variance == PosteriorVariance::kBeta ? beta : beta * (1.0 - ab_prev) / (1.0 - ab_t);
    out.vec() += S(std::sqrt(var)) * fresh_noise.vec();
  }
  return out;
}

/// DDPM posterior-mean step from t to t - 1 plus sigma_t noise; the final
/// step (t = 1) is deterministic and ignores `fresh_noise`.
template <typename S>
Tensor<S> ddpm_reverse_step(const Tensor<S>& eps_pred, const Tensor<S>& x_t, int t, const Tensor<S>& fresh_noise,
                            const NoiseSchedule& sched, PosteriorVariance variance = PosteriorVariance::kBeta) {
  return ddpm_reverse_jump(eps_pred, x_t, t, t - 1, fresh_noise, sched, variance);
}

/// Deterministic (eta = 0) DDIM update from t to t_prev. With clip_x0 the
/// clean-sample estimate is clamped and the noise re-derived from it.
template <typename S>
Tensor<S> ddim_reverse_step(const Tensor<S>& eps_pred, const Tensor<S>& x_t, int t, int t_prev,
                            const NoiseSchedule& sched, bool clip_x0 = false) {
  detail::check_same(eps_pred, x_t, "ddim_reverse_step");
  sched.check_t(t, "ddim_reverse_step");
  if (t_prev < 0 || t_prev >= t) throw std::invalid_argument("ddim_reverse_step: requires 0 <= t_prev < t");
  const double ab_t = sched.alpha_bar(t);
  const double ab_prev = sched.alpha_bar(t_prev);
  const auto x0 = detail::predict_x0(eps_pred, x_t, ab_t, clip_x0);
  Tensor<S> out(x_t.shape());
  if (clip_x0) {
    const auto eps = ((x_t.vec() - S(std::sqrt(ab_t)) * x0) / S(std::sqrt(1.0 - ab_t))).eval();
    out.vec() = S(std::sqrt(ab_prev)) * x0 + S(std::sqrt(1.0 - ab_prev)) * eps;
  } else {
    out.vec() = S(std::sqrt(ab_prev)) * x0 + S(std::sqrt(1.0 - ab_prev)) * eps_pred.vec();
  }
  return out;
}

/// Differentiable DDPM step with per-sample timesteps (all >= 1), used to
/// produce x_{t-1} for the discriminator while keeping the path to eps_pred.
template <typename S>
Var<S> ddpm_reverse_step(const Var<S>& eps_pred, const Tensor<S>& x_t, std::span<const int> t,
                         const Tensor<S>& fresh_noise, const NoiseSchedule& sched) {
  std::vector<S> keep(t.size()), eps_coef(t.size()), noise_coef(t.size());
  for (std::size_t i = 0; i < t.size(); ++i) {
    sched.check_t(t[i], "ddpm_reverse_step");
    const double a = sched.alpha(t[i]);
    keep[i] = S(1.0 / std::sqrt(a));
    eps_coef[i] = S(-sched.beta(t[i]) / (std::sqrt(a) * std::sqrt(1.0 - sched.alpha_bar(t[i]))));
    noise_coef[i] = t[i] > 1 ? S(std::sqrt(sched.beta(t[i]))) : S(0);
  }
  auto base = ops::mul_broadcast(ops::constant(x_t), ops::per_sample<S>(keep));
  auto noise = ops::mul_broadcast(ops::constant(fresh_noise), ops::per_sample<S>(noise_coef));
  auto eps = ops::mul_broadcast(eps_pred, ops::per_sample<S>(eps_coef));
  return ops::add(ops::add(base, noise), eps);
}

/// Descending timesteps T..1 evenly spaced over `steps` entries; always
/// contains T and 1.
std::vector<int> sampling_timesteps(int T, int steps);

template <typename S>
using NoisePredictor = std::function<Tensor<S>(const Tensor<S>& x_t, std::span<const int> t)>;

struct SamplerOptions {
  SamplerMode mode = SamplerMode::kDdim;
  int steps = 100;
  PosteriorVariance variance = PosteriorVariance::kBeta;
  /// Clamp each step's clean-sample estimate to the data range [-1, 1].
  bool clip_x0 = true;
};

/// Runs the reverse process from standard-normal noise of `state_shape`.
/// Random draws come from `rng` in a fixed order: the initial state, then one
/// fresh-noise tensor per non-final DDPM step.
template <typename S>
Tensor<S> sample_loop(const NoisePredictor<S>& model, const NoiseSchedule& sched, Shape state_shape,
                      const SamplerOptions& options, Rng& rng,
                      const std::function<void(int)>& on_step = {}) {
  if (options.steps < 1) throw std::invalid_argument("sample_loop: steps must be >= 1");
  if (options.steps > sched.T)
    throw std::invalid_argument("sample_loop: steps (" + std::to_string(options.steps) + ") exceed T (" +
                                std::to_string(sched.T) + ")");
  const auto timesteps = sampling_timesteps(sched.T, options.steps);
  Tensor<S> x = randn<S>(state_shape, rng);
  std::vector<int> tb(std::size_t(state_shape.n));
  for (std::size_t i = 0; i < timesteps.size(); ++i) {
    const int t = timesteps[i];
    const int t_prev = i + 1 < timesteps.size() ? timesteps[i + 1] : 0;
    std::fill(tb.begin(), tb.end(), t);
    if (on_step) on_step(t);
    const Tensor<S> eps = model(x, tb);
    if (options.mode == SamplerMode::kDdim) {
      x = ddim_reverse_step(eps, x, t, t_prev, sched, options.clip_x0);
    } else {
      const Tensor<S> z = t_prev > 0 ? randn<S>(state_shape, rng) : Tensor<S>();
      x = ddpm_reverse_jump(eps, x, t, t_prev, z, sched, options.variance, options.clip_x0);
    }
  }
  return x;
}

}  // namespace pairdiff
