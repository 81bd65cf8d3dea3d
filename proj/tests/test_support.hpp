#pragma once

#include <cmath>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "simcmf/core/random.hpp"
#include "simcmf/core/tensor.hpp"

namespace simcmf::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0, bool requires_grad = true) {
  auto t = Tensor::zeros(std::move(shape), requires_grad);
  for (auto& v : t.mutable_data()) v = rng.normal(0.0, scale);
  return t;
}

// Central finite differences of a scalar function with respect to every
// element of `wrt`. Perturbs the tensor in place and restores it.
inline std::vector<double> numeric_gradient(const std::function<double()>& f, const Tensor& wrt,
                                            double step = 1e-5) {
  std::vector<double> g(static_cast<std::size_t>(wrt.numel()));
  auto data = wrt.mutable_data();
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double orig = data[i];
    data[i] = orig + step;
    const double up = f();
    data[i] = orig - step;
    const double down = f();
    data[i] = orig;
    g[i] = (up - down) / (2 * step);
  }
  return g;
}

// max |a - b| / max(1, |b|, |a|) over elements.
inline double max_relative_error(std::span<const double> a, std::span<const double> b) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max({1e-8, std::abs(a[i]), std::abs(b[i])});
    const double diff = std::abs(a[i] - b[i]);
    if (diff < 1e-10) continue;
    worst = std::max(worst, diff / denom);
  }
  return worst;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::path(SIMCMF_TEST_TMP) / name;
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace simcmf::testing
