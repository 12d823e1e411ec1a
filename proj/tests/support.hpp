#pragma once

// Shared helpers for the unit tests: finite-difference gradient checks and
// small tensor builders.

#include "pairdiff/autograd.hpp"
#include "pairdiff/rng.hpp"

#include <doctest.h>
#include <unistd.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace testing {

using pairdiff::Shape;
using pairdiff::Tensor;
using pairdiff::Var;

inline Var<double> leaf(Shape shape, std::uint64_t seed, double scale = 1.0) {
  pairdiff::Rng rng(seed);
  auto t = pairdiff::randn<double>(shape, rng);
  t.vec() *= scale;
  return Var<double>(std::move(t), true);
}

inline Tensor<double> tensor(Shape shape, std::vector<double> values) {
  Tensor<double> t(shape);
  REQUIRE(values.size() == t.size());
  for (std::size_t i = 0; i < values.size(); ++i) t.vec()[Eigen::Index(i)] = values[i];
  return t;
}

struct GradCheckOptions {
  int samples_per_input = 10;
  double h = 1e-5;
  double rel_tol = 1e-3;
  /// Pairs whose magnitudes are both below this are compared absolutely.
  double abs_floor = 1e-7;
  std::uint64_t seed = 1;
  /// Record a doctest CHECK per sampled entry; off only for testing the checker.
  bool assert_each = true;
};

/// Compares reverse-mode gradients of sum(loss()) with central differences
/// at randomly chosen entries of every input. Returns the worst relative error.
inline double check_gradients(const std::vector<Var<double>>& inputs, const std::function<Var<double>()>& loss,
                              const GradCheckOptions& opt = {}) {
  for (auto v : inputs) v.zero_grad();
  loss().backward();
  std::vector<Tensor<double>> analytic;
  for (const auto& v : inputs) {
    analytic.push_back(v.node()->has_grad() ? v.node()->grad : Tensor<double>::zeros(v.shape()));
  }
  auto eval = [&] {
    pairdiff::NoGradGuard guard;
    return loss().value().vec().sum();
  };
  pairdiff::Rng rng(opt.seed);
  double worst = 0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    Var<double> v = inputs[k];
    const int n = int(v.value().size());
    const int samples = std::min(n, opt.samples_per_input);
    std::vector<int> picks(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) picks[std::size_t(i)] = i;
    std::shuffle(picks.begin(), picks.end(), rng);
    for (int s = 0; s < samples; ++s) {
      const int i = picks[std::size_t(s)];
      double& x = v.value().vec()[i];
      const double saved = x;
      x = saved + opt.h;
      const double up = eval();
      x = saved - opt.h;
      const double down = eval();
      x = saved;
      const double numeric = (up - down) / (2 * opt.h);
      const double a = analytic[k].vec()[i];
      const double scale = std::max(std::abs(a), std::abs(numeric));
      const double err = scale < opt.abs_floor ? 0.0 : std::abs(a - numeric) / scale;
      worst = std::max(worst, err);
      INFO("input " << k << " entry " << i << " analytic " << a << " numeric " << numeric);
      if (opt.assert_each) CHECK(err <= opt.rel_tol);
    }
  }
  return worst;
}

/// Fresh empty directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    path_ = std::filesystem::temp_directory_path() /
            ("pairdiff_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter()++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;
  const std::filesystem::path& path() const { return path_; }

 private:
  static int& counter() {
    static int c = 0;
    return c;
  }
  std::filesystem::path path_;
};

}  // namespace testing
