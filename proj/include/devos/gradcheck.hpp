#pragma once

// Central finite-difference comparison against the tape's analytic gradient.

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <vector>

#include "devos/tensor.hpp"

namespace devos {

struct GradCheckResult {
  double max_rel_error = 0.0;
  long checked = 0;
  long worst_index = -1;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

// max(|a|, |b|, 1e-6) denominator, element-wise.
inline double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), 1e-6});
}

// Perturbs `input` (a leaf) in place. At most `max_entries` coordinates are
// probed, picked with `seed`; max_entries <= 0 probes all of them.
// `analytic_scale` multiplies the analytic gradient before comparison; it
// exists so tests can inject a known-bad backward.
template <typename T>
GradCheckResult check_gradient(const std::function<Tensor<T>()>& loss_fn, Tensor<T> input, double h,
                               long max_entries = 0, unsigned seed = 0, double analytic_scale = 1.0) {
  input.zero_grad();
  Tensor<T> loss = loss_fn();
  backward(loss);
  std::vector<T> analytic(input.size(), T(0));
  if (input.has_grad()) std::copy(input.grad().begin(), input.grad().end(), analytic.begin());

  std::vector<long> indices(static_cast<std::size_t>(input.size()));
  std::iota(indices.begin(), indices.end(), 0L);
  if (max_entries > 0 && max_entries < input.size()) {
    std::mt19937 rng(seed);
    std::shuffle(indices.begin(), indices.end(), rng);
    indices.resize(static_cast<std::size_t>(max_entries));
  }

  GradCheckResult result;
  NoGradGuard no_grad;
  auto values = input.mutable_data();
  for (long i : indices) {
    const T original = values[i];
    values[i] = static_cast<T>(original + h);
    const double plus = loss_fn().item();
    values[i] = static_cast<T>(original - h);
    const double minus = loss_fn().item();
    values[i] = original;
    const double numeric = (plus - minus) / (2.0 * h);
    const double a = analytic_scale * analytic[i];
    const double err = relative_error(a, numeric);
    ++result.checked;
    if (result.worst_index < 0 || err > result.max_rel_error) {
      result.max_rel_error = err;
      result.worst_index = i;
      result.worst_analytic = a;
      result.worst_numeric = numeric;
    }
  }
  input.zero_grad();
  return result;
}

}  // namespace devos
