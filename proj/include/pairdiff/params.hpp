#pragma once

#include "pairdiff/autograd.hpp"

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <random>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

namespace pairdiff {

inline std::uint64_t fnv1a(std::string_view text) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char ch : text) {
    h ^= ch;
    h *= 1099511628211ull;
  }
  return h;
}

enum class Init { kUniformFanIn, kZeros, kOnes };

/// Ordered, named collection of trainable tensors.
///
/// Each parameter draws its initial values from a stream seeded by the store
/// seed and the parameter name, so initialization does not depend on the
/// order in which modules are built.
template <typename S>
class ParamStore {
 public:
  explicit ParamStore(std::uint64_t seed = 0) : seed_(seed) {}

  Var<S> add(const std::string& name, Shape shape, Init init, int fan_in = 1) {
    if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
    Tensor<S> value(shape);
    switch (init) {
      case Init::kZeros:
        break;
      case Init::kOnes:
        value.vec().setOnes();
        break;
      case Init::kUniformFanIn: {
        std::mt19937_64 rng(seed_ ^ fnv1a(name));
        const double bound = 1.0 / std::sqrt(double(std::max(fan_in, 1)));
        std::uniform_real_distribution<double> dist(-bound, bound);
        for (auto& v : value.vec()) v = S(dist(rng));
        break;
      }
    }
    Var<S> var(std::move(value), true);
    index_[name] = entries_.size();
    entries_.emplace_back(name, var);
    return var;
  }

  const std::vector<std::pair<std::string, Var<S>>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }

  Var<S> find(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
    return entries_[it->second].second;
  }
  bool contains(const std::string& name) const { return index_.count(name) > 0; }

  std::size_t scalar_count() const {
    std::size_t total = 0;
    for (const auto& [name, var] : entries_) total += var.value().size();
    return total;
  }

  void zero_grad() {
    for (auto& [name, var] : entries_) var.zero_grad();
  }

  std::uint64_t seed() const { return seed_; }

  void save(const std::filesystem::path& path) const;
  void load(const std::filesystem::path& path);

 private:
  std::uint64_t seed_;
  std::vector<std::pair<std::string, Var<S>>> entries_;
  std::map<std::string, std::size_t> index_;
};

/// Adam with bias correction.
template <typename S>
class Adam {
 public:
  struct Options {
    double lr = 2.1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double clip_norm = 0.0;  // 0 disables global-norm clipping
  };

  Adam(ParamStore<S>& params, Options options) : params_(&params), options_(options) {
    for (const auto& [name, var] : params.entries()) {
      m_.push_back(Tensor<S>::zeros(var.shape()));
      v_.push_back(Tensor<S>::zeros(var.shape()));
    }
  }

  void step() {
    ++t_;
    const auto& entries = params_->entries();
    double scale = 1.0;
    if (options_.clip_norm > 0) {
      double norm2 = 0;
      for (const auto& [name, var] : entries)
        if (var.node()->has_grad()) norm2 += double(var.node()->grad.vec().squaredNorm());
      const double norm = std::sqrt(norm2);
      if (norm > options_.clip_norm) scale = options_.clip_norm / norm;
    }
    const S b1 = S(options_.beta1), b2 = S(options_.beta2);
    const S c1 = S(1.0 - std::pow(options_.beta1, double(t_)));
    const S c2 = S(1.0 - std::pow(options_.beta2, double(t_)));
    const S lr = S(options_.lr), eps = S(options_.eps);
    for (std::size_t i = 0; i < entries.size(); ++i) {
      Node<S>* node = entries[i].second.node();
      if (!node->has_grad()) continue;
      const auto g = (node->grad.array() * S(scale)).eval();
      m_[i].array() = b1 * m_[i].array() + (S(1) - b1) * g;
      v_[i].array() = b2 * v_[i].array() + (S(1) - b2) * g.square();
      node->value.array() -= lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps);
    }
  }

  void set_lr(double lr) { options_.lr = lr; }
  const Options& options() const { return options_; }
  long long steps() const { return t_; }

  void save(const std::filesystem::path& path) const;
  void load(const std::filesystem::path& path);

 private:
  ParamStore<S>* params_;
  Options options_;
  std::vector<Tensor<S>> m_;
  std::vector<Tensor<S>> v_;
  long long t_ = 0;
};

/// Plain SGD with optional momentum.
template <typename S>
class Sgd {
 public:
  Sgd(ParamStore<S>& params, double lr, double momentum = 0.0) : params_(&params), lr_(lr), momentum_(momentum) {
    for (const auto& [name, var] : params.entries()) velocity_.push_back(Tensor<S>::zeros(var.shape()));
  }

  void step() {
    const auto& entries = params_->entries();
    for (std::size_t i = 0; i < entries.size(); ++i) {
      Node<S>* node = entries[i].second.node();
      if (!node->has_grad()) continue;
      if (momentum_ > 0) {
        velocity_[i].array() = S(momentum_) * velocity_[i].array() + node->grad.array();
        node->value.array() -= S(lr_) * velocity_[i].array();
      } else {
        node->value.array() -= S(lr_) * node->grad.array();
      }
    }
  }

 private:
  ParamStore<S>* params_;
  double lr_;
  double momentum_;
  std::vector<Tensor<S>> velocity_;
};

extern template class ParamStore<float>;
extern template class ParamStore<double>;
extern template class Adam<float>;
extern template class Adam<double>;

}  // namespace pairdiff
