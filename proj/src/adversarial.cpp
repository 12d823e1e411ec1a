#include "pairdiff/adversarial.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <stdexcept>
#include <string>

namespace pairdiff {

namespace {
std::atomic<std::uint64_t> g_adversarial_calls{0};
}

std::uint64_t adversarial_call_count() { return g_adversarial_calls.load(); }

void DiscriminatorSchedule::validate() const {
  if (T < 1) throw std::invalid_argument("discriminator schedule: T must be positive");
  if (!(sigma > 0)) throw std::invalid_argument("discriminator schedule: sigma must be positive");
  if (!(alpha_epochs > 0)) throw std::invalid_argument("discriminator schedule: alpha must be positive");
  if (i0 < 0) throw std::invalid_argument("discriminator schedule: i0 must be non-negative");
}

int t_max(double s, const DiscriminatorSchedule& sched) {
  const double ramp = std::floor(sched.sigma * (s / sched.alpha_epochs) + double(sched.i0));
  return int(std::min<double>(sched.T, ramp));
}

std::vector<int> sample_timesteps(int batch, int epoch, const DiscriminatorSchedule& sched, Rng& rng) {
  if (batch < 1) throw std::invalid_argument("sample_timesteps: batch must be >= 1");
  const int top = std::max(1, t_max(epoch, sched));
  std::vector<int> out(static_cast<std::size_t>(batch));
  int priority = 0;
  if (epoch < sched.priority_until_epoch) priority = (batch + 1) / 2;
  const int lo = std::max(1, int(std::ceil(0.75 * top)));
  for (int i = 0; i < batch; ++i) out[std::size_t(i)] = i < priority ? uniform_int(rng, lo, top) : uniform_int(rng, 1, top);
  return out;
}

template <typename S>
Discriminator<S>::Discriminator(const DiscriminatorConfig& config, std::uint64_t seed)
    : config_(config), params_(seed) {
  if (config.input_size < 4 || (config.input_size & (config.input_size - 1)) != 0)
    throw std::invalid_argument("discriminator: input_size must be a power of two >= 4");
  const int emb_dim = 4 * config.base_channels;
  time_ = nn::TimeEmbedding<S>::make(params_, "disc.time", config.base_channels, emb_dim);
  stem_ = nn::Conv2d<S>::make(params_, "disc.stem", config.state_channels, config.base_channels, 3);
  int ch = config.base_channels;
  int size = config.input_size;
  int index = 0;
  while (size > 4) {
    const std::string name = "disc.block" + std::to_string(index++);
    blocks_.push_back(Block{nn::Conv2d<S>::make(params_, name + ".conv", ch, 2 * ch, 3, 2),
                            nn::make_linear(params_, name + ".time", emb_dim, 2 * ch)});
    ch *= 2;
    size /= 2;
  }
  head_ = nn::make_linear(params_, "disc.head", ch, 1);
}

template <typename S>
Var<S> Discriminator<S>::operator()(const Var<S>& pair, std::span<const int> t) const {
  const Shape s = pair.shape();
  if (s.h != config_.input_size || s.w != config_.input_size || s.c != config_.state_channels)
    throw ShapeError("discriminator: unexpected input " + s.str());
  if (int(t.size()) != s.n) throw ShapeError("discriminator: one timestep per batch element required");
  for (int ti : t)
    if (ti < 0 || ti > config_.timesteps) throw std::out_of_range("discriminator: timestep out of range");
  auto emb = ops::silu(time_(t));
  auto h = ops::silu(stem_(pair));
  for (const auto& block : blocks_) h = ops::silu(ops::add_broadcast(block.conv(h), block.time_proj(emb)));
  auto logits = head_(ops::global_avg_pool(h));
  const S m = S(kOutputMargin);
  return ops::add_scalar(ops::scale(ops::sigmoid(logits), S(1) - S(2) * m), m);
}

template <typename S>
Var<S> discriminator_loss(const Discriminator<S>& disc, const Var<S>& real, const Var<S>& fake,
                          std::span<const int> t_real, std::span<const int> t_fake) {
  ++g_adversarial_calls;
  if (real.shape().n == 0 || fake.shape().n == 0) throw std::invalid_argument("discriminator_loss: empty batch");
  if (!std::equal(t_real.begin(), t_real.end(), t_fake.begin(), t_fake.end()))
    throw std::invalid_argument("discriminator_loss: real and fake batches are at different timesteps");
  auto p_real = disc(real, t_real);
  auto p_fake = disc(fake, t_fake);
  auto l_real = ops::bce(p_real, Tensor<S>::constant(p_real.shape(), S(1)));
  auto l_fake = ops::bce(p_fake, Tensor<S>::constant(p_fake.shape(), S(0)));
  const S wr = S(real.shape().n) / S(real.shape().n + fake.shape().n);
  return ops::add(ops::scale(l_real, wr), ops::scale(l_fake, S(1) - wr));
}

template <typename S>
Var<S> generator_adversarial_loss(const Discriminator<S>& disc, const Var<S>& fake, std::span<const int> t) {
  ++g_adversarial_calls;
  auto p = disc(fake, t);
  return ops::bce(p, Tensor<S>::constant(p.shape(), S(1)));
}

template class Discriminator<float>;
template class Discriminator<double>;
template Var<float> discriminator_loss(const Discriminator<float>&, const Var<float>&, const Var<float>&,
                                       std::span<const int>, std::span<const int>);
template Var<double> discriminator_loss(const Discriminator<double>&, const Var<double>&, const Var<double>&,
                                        std::span<const int>, std::span<const int>);
template Var<float> generator_adversarial_loss(const Discriminator<float>&, const Var<float>&, std::span<const int>);
template Var<double> generator_adversarial_loss(const Discriminator<double>&, const Var<double>&,
                                                std::span<const int>);

}  // namespace pairdiff
