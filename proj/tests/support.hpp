#pragma once

// Shared test helpers: random inputs and a finite-difference oracle that is
// independent of the library's gradcheck module.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "attnmvs/ops.hpp"

namespace testing_support {

using attnmvs::Shape;
using attnmvs::Tensor;

inline Tensor<double> random_parameter(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<double> v(static_cast<std::size_t>(attnmvs::shape_numel(shape)));
  for (auto& x : v) x = dist(rng);
  return Tensor<double>::parameter(std::move(shape), std::move(v));
}

inline Tensor<double> random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  auto t = random_parameter(std::move(shape), rng, lo, hi);
  t.set_requires_grad(false);
  return t;
}

using ScalarFn = std::function<double()>;

/// Max over entries of |analytic - numeric| / max(1, |numeric|), central differences.
/// With max_entries > 0 only that many randomly chosen entries are probed.
inline double fd_error(Tensor<double> x, std::span<const double> analytic, const ScalarFn& f, double eps = 1e-6,
                       std::size_t max_entries = 0, std::uint64_t seed = 0) {
  double worst = 0;
  auto values = x.mutable_values();
  std::vector<std::size_t> idx(values.size());
  for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
  if (max_entries && idx.size() > max_entries) {
    std::mt19937_64 rng(seed);
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(max_entries);
  }
  for (std::size_t i : idx) {
    const double saved = values[i];
    values[i] = saved + eps;
    const double up = f();
    values[i] = saved - eps;
    const double down = f();
    values[i] = saved;
    const double numeric = (up - down) / (2 * eps);
    worst = std::max(worst, std::abs(numeric - analytic[i]) / std::max(1.0, std::abs(numeric)));
  }
  return worst;
}

/// Gradient of sum(out * weights) for every input via the tape, then compared
/// against central differences. Returns the worst error over all inputs.
inline double check_gradients(const std::function<Tensor<double>(const std::vector<Tensor<double>>&)>& fn,
                              std::vector<Tensor<double>> inputs, std::uint64_t seed = 1, double eps = 1e-6,
                              std::size_t max_entries = 0) {
  using namespace attnmvs;
  std::mt19937_64 rng(seed);
  Tensor<double> readout;
  {
    NoGradScope<double> off;
    const auto probe = fn(inputs);
    readout = random_tensor(probe.shape(), rng);
  }
  for (auto& in : inputs) in.zero_grad();
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    tape.backward(sum(mul(fn(inputs), readout)));
  }
  std::vector<std::vector<double>> analytic;
  for (const auto& in : inputs) analytic.emplace_back(in.grad().begin(), in.grad().end());
  NoGradScope<double> off;
  auto value = [&] {
    const auto out = fn(inputs);
    double s = 0;
    for (std::size_t i = 0; i < out.numel(); ++i) s += out[i] * readout[i];
    return s;
  };
  double worst = 0;
  for (std::size_t t = 0; t < inputs.size(); ++t) worst = std::max(worst, fd_error(inputs[t], analytic[t], value, eps, max_entries, seed + t));
  return worst;
}

}  // namespace testing_support
