#include "pairdiff/diffusion.hpp"

#include <cmath>

namespace pairdiff {

NoiseSchedule make_linear_schedule(int T, double beta_start, double beta_end) {
  if (T < 1) throw std::invalid_argument("make_linear_schedule: T must be positive");
  if (!(beta_start > 0.0)) throw std::invalid_argument("make_linear_schedule: beta_start must be positive");
  if (!(beta_end < 1.0)) throw std::invalid_argument("make_linear_schedule: beta_end must be below 1");
  if (beta_start > beta_end) throw std::invalid_argument("make_linear_schedule: beta_start exceeds beta_end");
  NoiseSchedule s;
  s.T = T;
  if (T == 1) {
    s.betas = Eigen::VectorXd::Constant(1, beta_start);
  } else {
    s.betas = Eigen::VectorXd::LinSpaced(T, beta_start, beta_end);
  }
  s.alphas = 1.0 - s.betas.array();
  s.alpha_bars.resize(T);
  double prod = 1.0;
  for (int i = 0; i < T; ++i) {
    prod *= s.alphas[i];
    s.alpha_bars[i] = prod;
  }
  return s;
}

SamplerMode parse_sampler_mode(const std::string& text) {
  if (text == "ddpm") return SamplerMode::kDdpm;
  if (text == "ddim") return SamplerMode::kDdim;
  throw std::invalid_argument("unknown sampler mode '" + text + "' (expected ddpm or ddim)");
}

std::string to_string(SamplerMode mode) { return mode == SamplerMode::kDdpm ? "ddpm" : "ddim"; }

std::vector<int> sampling_timesteps(int T, int steps) {
  if (steps < 1 || steps > T) throw std::invalid_argument("sampling_timesteps: steps must lie in [1, T]");
  std::vector<int> out;
  out.reserve(std::size_t(steps));
  if (steps == 1) return {T};
  for (int i = 0; i < steps; ++i) {
    const double frac = double(i) / double(steps - 1);
    out.push_back(T - int(std::lround(frac * double(T - 1))));
  }
  return out;
}

}  // namespace pairdiff
