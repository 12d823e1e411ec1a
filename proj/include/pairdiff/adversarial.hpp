#pragma once

#include "pairdiff/layers.hpp"
#include "pairdiff/rng.hpp"

#include <cstdint>
#include <span>
#include <vector>

namespace pairdiff {

/// Ramp of the largest timestep exposed to the discriminator:
/// t_max(s) = min(T, floor(sigma * s / alpha + i0)), with s counted in epochs.
struct DiscriminatorSchedule {
  int T = 1000;
  double sigma = 20.0;
  double alpha_epochs = 10.0;
  int i0 = 20;
  int priority_until_epoch = 500;

  void validate() const;
};

int t_max(double s, const DiscriminatorSchedule& sched);

/// Timesteps in [1, t_max(epoch)]. Before the priority cutoff, the first
/// ceil(batch / 2) entries come from the top quarter [ceil(0.75 t_max), t_max].
std::vector<int> sample_timesteps(int batch, int epoch, const DiscriminatorSchedule& sched, Rng& rng);

struct DiscriminatorConfig {
  int base_channels = 16;
  int input_size = 16;
  int state_channels = 4;
  int timesteps = 1000;
};

/// Time-conditioned classifier of channel-stacked pairs: strided convolutions
/// down to 4x4 with the time embedding added per block, global average pool
/// and a linear head. Outputs lie strictly inside (0, 1).
template <typename S>
class Discriminator {
 public:
  static constexpr double kOutputMargin = 1e-6;

  Discriminator(const DiscriminatorConfig& config, std::uint64_t seed);

  ParamStore<S>& params() { return params_; }
  const ParamStore<S>& params() const { return params_; }
  const DiscriminatorConfig& config() const { return config_; }

  /// Probability of "real" per batch element, shape (N, 1, 1, 1). Timesteps
  /// may be 0 (clean pairs).
  Var<S> operator()(const Var<S>& pair, std::span<const int> t) const;

 private:
  struct Block {
    nn::Conv2d<S> conv;
    nn::Linear<S> time_proj;
  };
  DiscriminatorConfig config_;
  ParamStore<S> params_;
  nn::TimeEmbedding<S> time_;
  nn::Conv2d<S> stem_;
  std::vector<Block> blocks_;
  nn::Linear<S> head_;
};

/// Binary cross-entropy with real -> 1 and fake -> 0, averaged over both
/// batches. `fake` should be detached so only discriminator weights see
/// gradients. Throws if a batch is empty or the timesteps disagree.
template <typename S>
Var<S> discriminator_loss(const Discriminator<S>& disc, const Var<S>& real, const Var<S>& fake,
                          std::span<const int> t_real, std::span<const int> t_fake);

/// Non-saturating generator loss: BCE of D(fake) against 1.
template <typename S>
Var<S> generator_adversarial_loss(const Discriminator<S>& disc, const Var<S>& fake, std::span<const int> t);

/// Number of discriminator_loss and generator_adversarial_loss calls made in
/// this process.
std::uint64_t adversarial_call_count();

/// mse + weight * adversarial.
template <typename S>
Var<S> combined_generator_loss(const Var<S>& mse, const Var<S>& adversarial, double weight = 0.25) {
  return ops::add(mse, ops::scale(adversarial, S(weight)));
}

extern template class Discriminator<float>;
extern template class Discriminator<double>;

}  // namespace pairdiff
