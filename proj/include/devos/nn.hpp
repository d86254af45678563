#pragma once

// Parameter bookkeeping, seeded initialization, the two layer types every
// module is assembled from, and the Adam optimizer.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "devos/ops.hpp"
#include "devos/tensor.hpp"

namespace devos {

template <typename T>
struct NamedParam {
  std::string name;
  Tensor<T> value;
};

template <typename T>
using ParamList = std::vector<NamedParam<T>>;

// Draws in double so float and double instantiations built from the same seed
// start from the same (rounded) values.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  template <typename T>
  Tensor<T> normal(const Shape& shape, double stddev) {
    std::normal_distribution<double> dist(0.0, stddev);
    std::vector<T> v(static_cast<std::size_t>(numel(shape)));
    for (auto& x : v) x = static_cast<T>(dist(rng_));
    return Tensor<T>(shape, std::move(v), true);
  }

  template <typename T>
  Tensor<T> uniform(const Shape& shape, double bound) {
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<T> v(static_cast<std::size_t>(numel(shape)));
    for (auto& x : v) x = static_cast<T>(dist(rng_));
    return Tensor<T>(shape, std::move(v), true);
  }

  template <typename T>
  Tensor<T> zeros(const Shape& shape) {
    return Tensor<T>::zeros(shape, true);
  }

  std::mt19937_64& engine() { return rng_; }

 private:
  std::mt19937_64 rng_;
};

// y = x W + b on token matrices x[N, in].
template <typename T>
class Linear {
 public:
  Linear() = default;
  Linear(Initializer& init, int in, int out, bool bias = true)
      : weight_(init.uniform<T>({in, out}, 1.0 / std::sqrt(static_cast<double>(in)))) {
    if (bias) bias_ = init.zeros<T>({out});
  }

  Tensor<T> operator()(const Tensor<T>& x) const { return linear(x, weight_, bias_); }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".weight", weight_});
    if (bias_.defined()) out.push_back({prefix + ".bias", bias_});
  }

  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }
  const Tensor<T>& weight() const { return weight_; }
  const Tensor<T>& bias() const { return bias_; }
  int in_features() const { return weight_.dim(0); }
  int out_features() const { return weight_.dim(1); }

  // Zero weight and bias (used for heads that must start as the identity).
  void zero() {
    for (auto& v : weight_.mutable_data()) v = T(0);
    if (bias_.defined()) {
      for (auto& v : bias_.mutable_data()) v = T(0);
    }
  }

 private:
  Tensor<T> weight_;
  Tensor<T> bias_;
};

template <typename T>
class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(Initializer& init, int in, int out, int kernel, int stride, int padding)
      : weight_(init.normal<T>({out, in, kernel, kernel}, std::sqrt(2.0 / (in * kernel * kernel)))),
        bias_(init.zeros<T>({out})),
        stride_(stride),
        padding_(padding) {}

  Tensor<T> operator()(const Tensor<T>& x) const { return conv2d(x, weight_, bias_, stride_, padding_); }

  void collect(const std::string& prefix, ParamList<T>& out) const {
    out.push_back({prefix + ".weight", weight_});
    out.push_back({prefix + ".bias", bias_});
  }

  Tensor<T>& weight() { return weight_; }
  Tensor<T>& bias() { return bias_; }
  const Tensor<T>& weight() const { return weight_; }
  const Tensor<T>& bias() const { return bias_; }
  int out_channels() const { return weight_.dim(0); }

 private:
  Tensor<T> weight_;
  Tensor<T> bias_;
  int stride_ = 1;
  int padding_ = 0;
};

template <typename T>
void zero_grads(const ParamList<T>& params) {
  for (const auto& p : params) {
    Tensor<T> t = p.value;
    t.zero_grad();
  }
}

// Copies values between parameter lists of possibly different scalar types,
// matching entries by name.
template <typename Dst, typename Src>
void copy_params(const ParamList<Src>& from, ParamList<Dst>& to) {
  if (from.size() != to.size()) throw UsageError("copy_params: parameter lists differ in length");
  for (std::size_t i = 0; i < from.size(); ++i) {
    if (from[i].name != to[i].name || from[i].value.shape() != to[i].value.shape()) {
      throw UsageError("copy_params: mismatch at " + from[i].name);
    }
    auto dst = to[i].value.mutable_data();
    auto src = from[i].value.data();
    for (std::size_t j = 0; j < src.size(); ++j) dst[j] = static_cast<Dst>(src[j]);
  }
}

struct AdamOptions {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

template <typename T>
class Adam {
 public:
  Adam(ParamList<T> params, AdamOptions options) : params_(std::move(params)), options_(options) {
    for (const auto& p : params_) {
      m_.emplace_back(p.value.size(), 0.0);
      v_.emplace_back(p.value.size(), 0.0);
    }
  }

  void step() {
    ++step_;
    const double c1 = 1.0 - std::pow(options_.beta1, static_cast<double>(step_));
    const double c2 = 1.0 - std::pow(options_.beta2, static_cast<double>(step_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor<T> p = params_[i].value;
      if (!p.has_grad()) continue;
      auto g = p.grad();
      auto w = p.mutable_data();
      for (std::size_t j = 0; j < w.size(); ++j) {
        m_[i][j] = options_.beta1 * m_[i][j] + (1 - options_.beta1) * g[j];
        v_[i][j] = options_.beta2 * v_[i][j] + (1 - options_.beta2) * g[j] * g[j];
        w[j] -= static_cast<T>(options_.lr * (m_[i][j] / c1) / (std::sqrt(v_[i][j] / c2) + options_.eps));
      }
    }
  }

  long steps() const { return step_; }
  const std::vector<std::vector<double>>& first_moments() const { return m_; }
  const std::vector<std::vector<double>>& second_moments() const { return v_; }
  void restore(long step, std::vector<std::vector<double>> m, std::vector<std::vector<double>> v) {
    step_ = step;
    m_ = std::move(m);
    v_ = std::move(v);
  }

 private:
  ParamList<T> params_;
  AdamOptions options_;
  std::vector<std::vector<double>> m_, v_;
  long step_ = 0;
};

}  // namespace devos
