#include "devos/ops.hpp"

#include <Eigen/Core>
#include <algorithm>
#include <cmath>
#include <limits>

namespace devos {

namespace {

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using RowMatd = RowMat<double>;

template <typename T>
Eigen::Map<const RowMat<T>> cmap(const T* p, int rows, int cols) {
  return Eigen::Map<const RowMat<T>>(p, rows, cols);
}

// C[M, N] += op(A) * op(B) with double accumulation. A is stored as
// [a_rows, a_cols] and transposed when trans_a is set; likewise B.
template <typename T>
void gemm_acc(const T* a, int a_rows, int a_cols, bool trans_a, const T* b, int b_rows, int b_cols, bool trans_b,
              T* c) {
  RowMatd ad = cmap(a, a_rows, a_cols).template cast<double>();
  RowMatd bd = cmap(b, b_rows, b_cols).template cast<double>();
  RowMatd prod;
  if (trans_a && trans_b) {
    prod.noalias() = ad.transpose() * bd.transpose();
  } else if (trans_a) {
    prod.noalias() = ad.transpose() * bd;
  } else if (trans_b) {
    prod.noalias() = ad * bd.transpose();
  } else {
    prod.noalias() = ad * bd;
  }
  Eigen::Map<RowMat<T>> cm(c, prod.rows(), prod.cols());
  cm += prod.template cast<T>();
}

template <typename T>
std::vector<T>& grad_of(Node<T>& out, std::size_t i) {
  return out.parents[i]->ensure_grad();
}

bool is_suffix(const Shape& full, const Shape& part) {
  if (part.size() > full.size()) return false;
  return std::equal(part.rbegin(), part.rend(), full.rbegin());
}

template <typename T>
void check_broadcast(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (!is_suffix(a.shape(), b.shape())) {
    throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(b.shape()) + " onto " +
                         shape_str(a.shape()));
  }
}

struct AxisSplit {
  long outer = 1;
  long n = 1;
  long inner = 1;
};

AxisSplit split_at(const Shape& shape, int axis) {
  AxisSplit s;
  for (int i = 0; i < axis; ++i) s.outer *= shape[i];
  s.n = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

int normalize_axis(int axis, int ndim) {
  if (axis < 0) axis += ndim;
  if (axis < 0 || axis >= ndim) throw DimensionError("axis out of range");
  return axis;
}

template <typename T>
void require_map(const Tensor<T>& x, const char* op) {
  if (x.ndim() != 3) throw DimensionError(std::string(op) + ": expected [C,H,W], got " + shape_str(x.shape()));
}

}  // namespace

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  check_broadcast(a, b, "add");
  const auto av = a.data();
  const auto bv = b.data();
  const long nb = b.size();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i % nb];
  return detail::make_result<T>(a.shape(), std::move(out), "add", {a, b}, [nb](Node<T>& o) {
    if (detail::wants_grad(o, 0)) {
      auto& ga = grad_of(o, 0);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += o.grad[i];
    }
    if (detail::wants_grad(o, 1)) {
      std::vector<double> acc(nb, 0.0);
      for (std::size_t i = 0; i < o.grad.size(); ++i) acc[i % nb] += o.grad[i];
      auto& gb = grad_of(o, 1);
      for (long i = 0; i < nb; ++i) gb[i] += static_cast<T>(acc[i]);
    }
  });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  check_broadcast(a, b, "sub");
  const auto av = a.data();
  const auto bv = b.data();
  const long nb = b.size();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i % nb];
  return detail::make_result<T>(a.shape(), std::move(out), "sub", {a, b}, [nb](Node<T>& o) {
    if (detail::wants_grad(o, 0)) {
      auto& ga = grad_of(o, 0);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += o.grad[i];
    }
    if (detail::wants_grad(o, 1)) {
      std::vector<double> acc(nb, 0.0);
      for (std::size_t i = 0; i < o.grad.size(); ++i) acc[i % nb] += o.grad[i];
      auto& gb = grad_of(o, 1);
      for (long i = 0; i < nb; ++i) gb[i] -= static_cast<T>(acc[i]);
    }
  });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  check_broadcast(a, b, "mul");
  const auto av = a.data();
  const auto bv = b.data();
  const long nb = b.size();
  std::vector<T> out(av.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i % nb];
  return detail::make_result<T>(a.shape(), std::move(out), "mul", {a, b}, [nb](Node<T>& o) {
    const auto& ad = o.parents[0]->data;
    const auto& bd = o.parents[1]->data;
    if (detail::wants_grad(o, 0)) {
      auto& ga = grad_of(o, 0);
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += o.grad[i] * bd[i % nb];
    }
    if (detail::wants_grad(o, 1)) {
      std::vector<double> acc(nb, 0.0);
      for (std::size_t i = 0; i < o.grad.size(); ++i) acc[i % nb] += double(o.grad[i]) * ad[i];
      auto& gb = grad_of(o, 1);
      for (long i = 0; i < nb; ++i) gb[i] += static_cast<T>(acc[i]);
    }
  });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T factor) {
  std::vector<T> out(a.data().begin(), a.data().end());
  for (T& v : out) v *= factor;
  return detail::make_result<T>(a.shape(), std::move(out), "scale", {a}, [factor](Node<T>& o) {
    auto& ga = grad_of(o, 0);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += o.grad[i] * factor;
  });
}

template <typename T>
Tensor<T> add_channel(const Tensor<T>& x, const Tensor<T>& bias) {
  if (bias.ndim() != 1 || bias.dim(0) != x.dim(0)) {
    throw DimensionError("add_channel: bias " + shape_str(bias.shape()) + " vs input " + shape_str(x.shape()));
  }
  const long channels = x.dim(0);
  const long inner = x.size() / channels;
  std::vector<T> out(x.data().begin(), x.data().end());
  for (long c = 0; c < channels; ++c) {
    for (long j = 0; j < inner; ++j) out[c * inner + j] += bias[c];
  }
  return detail::make_result<T>(x.shape(), std::move(out), "add_channel", {x, bias},
                                [channels, inner](Node<T>& o) {
                                  if (detail::wants_grad(o, 0)) {
                                    auto& gx = grad_of(o, 0);
                                    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += o.grad[i];
                                  }
                                  if (detail::wants_grad(o, 1)) {
                                    auto& gb = grad_of(o, 1);
                                    for (long c = 0; c < channels; ++c) {
                                      double acc = 0.0;
                                      for (long j = 0; j < inner; ++j) acc += o.grad[c * inner + j];
                                      gb[c] += static_cast<T>(acc);
                                    }
                                  }
                                });
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() < 2 || b.ndim() < 2) {
    throw DimensionError("matmul needs at least 2-D operands, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const int m = a.dim(-2);
  const int k = a.dim(-1);
  const int n = b.dim(-1);
  if (b.dim(-2) != k) {
    throw DimensionError("matmul inner dimensions differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const Shape a_batch(a.shape().begin(), a.shape().end() - 2);
  const Shape b_batch(b.shape().begin(), b.shape().end() - 2);
  if (!a_batch.empty() && !b_batch.empty() && a_batch != b_batch) {
    throw DimensionError("matmul batch dimensions differ: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const Shape& batch = a_batch.empty() ? b_batch : a_batch;
  const long nbatch = numel(batch);
  const bool a_bcast = a_batch.empty();
  const bool b_bcast = b_batch.empty();
  Shape out_shape = batch;
  out_shape.push_back(m);
  out_shape.push_back(n);
  std::vector<T> out(static_cast<std::size_t>(nbatch * m * n), T(0));
  const T* ap = a.data().data();
  const T* bp = b.data().data();
  for (long i = 0; i < nbatch; ++i) {
    gemm_acc(ap + (a_bcast ? 0 : i * m * k), m, k, false, bp + (b_bcast ? 0 : i * k * n), k, n, false,
             out.data() + i * m * n);
  }
  return detail::make_result<T>(out_shape, std::move(out), "matmul", {a, b},
                                [=](Node<T>& o) {
                                  const T* ad = o.parents[0]->data.data();
                                  const T* bd = o.parents[1]->data.data();
                                  const T* g = o.grad.data();
                                  if (detail::wants_grad(o, 0)) {
                                    T* ga = grad_of(o, 0).data();
                                    for (long i = 0; i < nbatch; ++i) {
                                      // dA = dC B^T
                                      gemm_acc(g + i * m * n, m, n, false, bd + (b_bcast ? 0 : i * k * n), k, n, true,
                                               ga + (a_bcast ? 0 : i * m * k));
                                    }
                                  }
                                  if (detail::wants_grad(o, 1)) {
                                    T* gb = grad_of(o, 1).data();
                                    for (long i = 0; i < nbatch; ++i) {
                                      // dB = A^T dC
                                      gemm_acc(ad + (a_bcast ? 0 : i * m * k), m, k, true, g + i * m * n, m, n, false,
                                               gb + (b_bcast ? 0 : i * k * n));
                                    }
                                  }
                                });
}

template <typename T>
Tensor<T> transpose(const Tensor<T>& a) {
  if (a.ndim() < 2) throw DimensionError("transpose needs at least 2-D, got " + shape_str(a.shape()));
  const int r = a.dim(-2);
  const int c = a.dim(-1);
  const long nbatch = a.size() / (static_cast<long>(r) * c);
  Shape out_shape = a.shape();
  std::swap(out_shape[out_shape.size() - 1], out_shape[out_shape.size() - 2]);
  const auto av = a.data();
  std::vector<T> out(av.size());
  for (long b = 0; b < nbatch; ++b) {
    const long off = b * r * c;
    for (int i = 0; i < r; ++i) {
      for (int j = 0; j < c; ++j) out[off + static_cast<long>(j) * r + i] = av[off + static_cast<long>(i) * c + j];
    }
  }
  return detail::make_result<T>(out_shape, std::move(out), "transpose", {a}, [=](Node<T>& o) {
    auto& ga = grad_of(o, 0);
    for (long b = 0; b < nbatch; ++b) {
      const long off = b * r * c;
      for (int i = 0; i < r; ++i) {
        for (int j = 0; j < c; ++j) ga[off + static_cast<long>(i) * c + j] += o.grad[off + static_cast<long>(j) * r + i];
      }
    }
  });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, const Shape& shape) {
  if (numel(shape) != a.size()) {
    throw DimensionError("reshape " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  std::vector<T> out(a.data().begin(), a.data().end());
  return detail::make_result<T>(shape, std::move(out), "reshape", {a}, [](Node<T>& o) {
    auto& ga = grad_of(o, 0);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += o.grad[i];
  });
}

template <typename T>
Tensor<T> slice(const Tensor<T>& a, int axis, int begin, int end) {
  axis = normalize_axis(axis, a.ndim());
  if (begin < 0 || end > a.dim(axis) || begin >= end) {
    throw DimensionError("slice [" + std::to_string(begin) + "," + std::to_string(end) + ") out of range for " +
                         shape_str(a.shape()));
  }
  const AxisSplit s = split_at(a.shape(), axis);
  const long width = end - begin;
  Shape out_shape = a.shape();
  out_shape[axis] = static_cast<int>(width);
  const auto av = a.data();
  std::vector<T> out(static_cast<std::size_t>(s.outer * width * s.inner));
  for (long o = 0; o < s.outer; ++o) {
    std::copy_n(av.begin() + (o * s.n + begin) * s.inner, width * s.inner, out.begin() + o * width * s.inner);
  }
  return detail::make_result<T>(out_shape, std::move(out), "slice", {a}, [=](Node<T>& node) {
    auto& ga = grad_of(node, 0);
    for (long o = 0; o < s.outer; ++o) {
      const T* src = node.grad.data() + o * width * s.inner;
      T* dst = ga.data() + (o * s.n + begin) * s.inner;
      for (long i = 0; i < width * s.inner; ++i) dst[i] += src[i];
    }
  });
}

template <typename T>
Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw DimensionError("concat of zero tensors");
  axis = normalize_axis(axis, parts[0].ndim());
  Shape out_shape = parts[0].shape();
  int total = 0;
  for (const auto& p : parts) {
    Shape probe = p.shape();
    if (probe.size() != out_shape.size()) throw DimensionError("concat rank mismatch: " + shape_str(probe));
    probe[axis] = out_shape[axis];
    if (probe != out_shape) {
      throw DimensionError("concat shape mismatch: " + shape_str(p.shape()) + " vs " + shape_str(parts[0].shape()));
    }
    total += p.dim(axis);
  }
  out_shape[axis] = total;
  const AxisSplit s = split_at(out_shape, axis);
  std::vector<T> out(static_cast<std::size_t>(numel(out_shape)));
  std::vector<long> offsets;
  long offset = 0;
  for (const auto& p : parts) {
    offsets.push_back(offset);
    const long w = p.dim(axis);
    const auto pv = p.data();
    for (long o = 0; o < s.outer; ++o) {
      std::copy_n(pv.begin() + o * w * s.inner, w * s.inner, out.begin() + (o * s.n + offset) * s.inner);
    }
    offset += w;
  }
  return detail::make_result<T>(out_shape, std::move(out), "concat", parts, [=](Node<T>& node) {
    for (std::size_t pi = 0; pi < node.parents.size(); ++pi) {
      if (!detail::wants_grad(node, pi)) continue;
      auto& gp = grad_of(node, pi);
      const long w = node.parents[pi]->shape[axis];
      for (long o = 0; o < s.outer; ++o) {
        const T* src = node.grad.data() + (o * s.n + offsets[pi]) * s.inner;
        T* dst = gp.data() + o * w * s.inner;
        for (long i = 0; i < w * s.inner; ++i) dst[i] += src[i];
      }
    }
  });
}

template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis) {
  axis = normalize_axis(axis, x.ndim());
  const AxisSplit s = split_at(x.shape(), axis);
  const auto xv = x.data();
  std::vector<T> out(xv.size());
  for (long o = 0; o < s.outer; ++o) {
    for (long in = 0; in < s.inner; ++in) {
      const long base = o * s.n * s.inner + in;
      double mx = -std::numeric_limits<double>::infinity();
      for (long i = 0; i < s.n; ++i) mx = std::max(mx, double(xv[base + i * s.inner]));
      double total = 0.0;
      std::vector<double> e(static_cast<std::size_t>(s.n));
      for (long i = 0; i < s.n; ++i) {
        e[i] = std::exp(double(xv[base + i * s.inner]) - mx);
        total += e[i];
      }
      for (long i = 0; i < s.n; ++i) out[base + i * s.inner] = static_cast<T>(e[i] / total);
    }
  }
  return detail::make_result<T>(x.shape(), std::move(out), "softmax", {x}, [s](Node<T>& node) {
    auto& gx = grad_of(node, 0);
    const auto& y = node.data;
    const auto& g = node.grad;
    for (long o = 0; o < s.outer; ++o) {
      for (long in = 0; in < s.inner; ++in) {
        const long base = o * s.n * s.inner + in;
        double dot = 0.0;
        for (long i = 0; i < s.n; ++i) dot += double(g[base + i * s.inner]) * y[base + i * s.inner];
        for (long i = 0; i < s.n; ++i) {
          const long idx = base + i * s.inner;
          gx[idx] += static_cast<T>(y[idx] * (g[idx] - dot));
        }
      }
    }
  });
}

template <typename T>
Tensor<T> tanh(const Tensor<T>& x) {
  const T below_one = std::nextafter(T(1), T(0));
  std::vector<T> out(x.data().begin(), x.data().end());
  for (T& v : out) v = std::clamp(std::tanh(v), -below_one, below_one);
  return detail::make_result<T>(x.shape(), std::move(out), "tanh", {x}, [](Node<T>& node) {
    auto& gx = grad_of(node, 0);
    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += node.grad[i] * (T(1) - node.data[i] * node.data[i]);
  });
}

template <typename T>
Tensor<T> relu(const Tensor<T>& x) {
  std::vector<T> out(x.data().begin(), x.data().end());
  for (T& v : out) v = v > T(0) ? v : T(0);
  return detail::make_result<T>(x.shape(), std::move(out), "relu", {x}, [](Node<T>& node) {
    auto& gx = grad_of(node, 0);
    for (std::size_t i = 0; i < gx.size(); ++i) {
      if (node.data[i] > T(0)) gx[i] += node.grad[i];
    }
  });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& x) {
  double total = 0.0;
  for (T v : x.data()) total += v;
  return detail::make_result<T>({1}, {static_cast<T>(total)}, "sum", {x}, [](Node<T>& node) {
    auto& gx = grad_of(node, 0);
    for (auto& g : gx) g += node.grad[0];
  });
}

template <typename T>
Tensor<T> mean(const Tensor<T>& x) {
  return scale(sum(x), static_cast<T>(1.0 / static_cast<double>(x.size())));
}

template <typename T>
Tensor<T> bilinear_sample(const Tensor<T>& feature, const Tensor<T>& points) {
  require_map(feature, "bilinear_sample");
  if (points.ndim() != 2 || points.dim(1) != 2) {
    throw DimensionError("bilinear_sample: points must be [P,2], got " + shape_str(points.shape()));
  }
  for (T v : points.data()) {
    if (!std::isfinite(v)) throw InputError("bilinear_sample: non-finite sampling coordinate");
  }
  const int channels = feature.dim(0);
  const int height = feature.dim(1);
  const int width = feature.dim(2);
  const long plane = static_cast<long>(height) * width;
  const int count = points.dim(0);

  struct Tap {
    int y0, y1, x0, x1;
    double wy, wx;
    bool clamped_y, clamped_x;
  };
  std::vector<Tap> taps(static_cast<std::size_t>(count));
  const auto pv = points.data();
  for (int p = 0; p < count; ++p) {
    const double py = pv[2 * p];
    const double px = pv[2 * p + 1];
    const double y = std::clamp(py, 0.0, double(height - 1));
    const double x = std::clamp(px, 0.0, double(width - 1));
    Tap t;
    t.clamped_y = py < 0.0 || py > height - 1;
    t.clamped_x = px < 0.0 || px > width - 1;
    t.y0 = static_cast<int>(std::floor(y));
    t.x0 = static_cast<int>(std::floor(x));
    t.y1 = std::min(t.y0 + 1, height - 1);
    t.x1 = std::min(t.x0 + 1, width - 1);
    t.wy = y - t.y0;
    t.wx = x - t.x0;
    taps[p] = t;
  }

  const auto fv = feature.data();
  std::vector<T> out(static_cast<std::size_t>(count) * channels);
  for (int p = 0; p < count; ++p) {
    const Tap& t = taps[p];
    const double w00 = (1 - t.wy) * (1 - t.wx), w01 = (1 - t.wy) * t.wx;
    const double w10 = t.wy * (1 - t.wx), w11 = t.wy * t.wx;
    const long i00 = static_cast<long>(t.y0) * width + t.x0, i01 = static_cast<long>(t.y0) * width + t.x1;
    const long i10 = static_cast<long>(t.y1) * width + t.x0, i11 = static_cast<long>(t.y1) * width + t.x1;
    for (int c = 0; c < channels; ++c) {
      const T* f = fv.data() + c * plane;
      out[static_cast<long>(p) * channels + c] =
          static_cast<T>(w00 * f[i00] + w01 * f[i01] + w10 * f[i10] + w11 * f[i11]);
    }
  }

  return detail::make_result<T>(
      {count, channels}, std::move(out), "bilinear_sample", {feature, points},
      [taps = std::move(taps), channels, width, plane](Node<T>& node) {
        const auto& g = node.grad;
        const bool want_f = detail::wants_grad(node, 0);
        const bool want_p = detail::wants_grad(node, 1);
        const auto& fd = node.parents[0]->data;
        T* gf = want_f ? grad_of(node, 0).data() : nullptr;
        T* gp = want_p ? grad_of(node, 1).data() : nullptr;
        for (std::size_t p = 0; p < taps.size(); ++p) {
          const Tap& t = taps[p];
          const long i00 = static_cast<long>(t.y0) * width + t.x0, i01 = static_cast<long>(t.y0) * width + t.x1;
          const long i10 = static_cast<long>(t.y1) * width + t.x0, i11 = static_cast<long>(t.y1) * width + t.x1;
          double dy = 0.0, dx = 0.0;
          for (int c = 0; c < channels; ++c) {
            const double gc = g[p * channels + c];
            if (gc == 0.0) continue;
            if (gf) {
              T* f = gf + c * plane;
              f[i00] += static_cast<T>(gc * (1 - t.wy) * (1 - t.wx));
              f[i01] += static_cast<T>(gc * (1 - t.wy) * t.wx);
              f[i10] += static_cast<T>(gc * t.wy * (1 - t.wx));
              f[i11] += static_cast<T>(gc * t.wy * t.wx);
            }
            if (gp) {
              const T* f = fd.data() + c * plane;
              dy += gc * ((1 - t.wx) * (double(f[i10]) - f[i00]) + t.wx * (double(f[i11]) - f[i01]));
              dx += gc * ((1 - t.wy) * (double(f[i01]) - f[i00]) + t.wy * (double(f[i11]) - f[i10]));
            }
          }
          if (gp) {
            if (!t.clamped_y) gp[2 * p] += static_cast<T>(dy);
            if (!t.clamped_x) gp[2 * p + 1] += static_cast<T>(dx);
          }
        }
      });
}

template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int stride, int padding) {
  require_map(x, "conv2d");
  if (weight.ndim() != 4 || weight.dim(1) != x.dim(0) || weight.dim(2) != weight.dim(3)) {
    throw DimensionError("conv2d: weight " + shape_str(weight.shape()) + " incompatible with input " +
                         shape_str(x.shape()));
  }
  const int cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int cout = weight.dim(0), k = weight.dim(2);
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != cout)) {
    throw DimensionError("conv2d: bias " + shape_str(bias.shape()) + " for " + std::to_string(cout) + " outputs");
  }
  const int ho = (h + 2 * padding - k) / stride + 1;
  const int wo = (w + 2 * padding - k) / stride + 1;
  if (ho <= 0 || wo <= 0) throw DimensionError("conv2d: input " + shape_str(x.shape()) + " too small");
  const int rows = cin * k * k;
  const int cols = ho * wo;

  // im2col: cols[(c*k + ky)*k + kx, oy*wo + ox]
  auto col = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows) * cols, T(0));
  const auto xv = x.data();
  for (int c = 0; c < cin; ++c) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        T* dst = col->data() + static_cast<long>((c * k + ky) * k + kx) * cols;
        for (int oy = 0; oy < ho; ++oy) {
          const int iy = oy * stride - padding + ky;
          if (iy < 0 || iy >= h) continue;
          for (int ox = 0; ox < wo; ++ox) {
            const int ix = ox * stride - padding + kx;
            if (ix < 0 || ix >= w) continue;
            dst[oy * wo + ox] = xv[(static_cast<long>(c) * h + iy) * w + ix];
          }
        }
      }
    }
  }
  std::vector<T> out(static_cast<std::size_t>(cout) * cols, T(0));
  gemm_acc(weight.data().data(), cout, rows, false, col->data(), rows, cols, false, out.data());
  if (bias.defined()) {
    for (int o = 0; o < cout; ++o) {
      for (int j = 0; j < cols; ++j) out[static_cast<long>(o) * cols + j] += bias[o];
    }
  }
  return detail::make_result<T>(
      {cout, ho, wo}, std::move(out), "conv2d", {x, weight, bias},
      [=](Node<T>& node) {
        const T* g = node.grad.data();
        if (detail::wants_grad(node, 1)) {
          gemm_acc(g, cout, cols, false, col->data(), rows, cols, true, grad_of(node, 1).data());
        }
        if (detail::wants_grad(node, 2)) {
          auto& gb = grad_of(node, 2);
          for (int o = 0; o < cout; ++o) {
            double acc = 0.0;
            for (int j = 0; j < cols; ++j) acc += g[static_cast<long>(o) * cols + j];
            gb[o] += static_cast<T>(acc);
          }
        }
        if (detail::wants_grad(node, 0)) {
          std::vector<T> gcol(static_cast<std::size_t>(rows) * cols, T(0));
          gemm_acc(node.parents[1]->data.data(), cout, rows, true, g, cout, cols, false, gcol.data());
          auto& gx = grad_of(node, 0);
          for (int c = 0; c < cin; ++c) {
            for (int ky = 0; ky < k; ++ky) {
              for (int kx = 0; kx < k; ++kx) {
                const T* src = gcol.data() + static_cast<long>((c * k + ky) * k + kx) * cols;
                for (int oy = 0; oy < ho; ++oy) {
                  const int iy = oy * stride - padding + ky;
                  if (iy < 0 || iy >= h) continue;
                  for (int ox = 0; ox < wo; ++ox) {
                    const int ix = ox * stride - padding + kx;
                    if (ix < 0 || ix >= w) continue;
                    gx[(static_cast<long>(c) * h + iy) * w + ix] += src[oy * wo + ox];
                  }
                }
              }
            }
          }
        }
      });
}

template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, int groups, double eps) {
  require_map(x, "group_norm");
  const int channels = x.dim(0);
  if (groups <= 0 || channels % groups != 0) {
    throw DimensionError("group_norm: " + std::to_string(channels) + " channels not divisible into " +
                         std::to_string(groups) + " groups");
  }
  if (gamma.size() != channels || beta.size() != channels) {
    throw DimensionError("group_norm: affine parameters must have " + std::to_string(channels) + " entries");
  }
  const long plane = static_cast<long>(x.dim(1)) * x.dim(2);
  const int per_group = channels / groups;
  const long group_size = per_group * plane;
  const auto xv = x.data();
  auto xhat = std::make_shared<std::vector<double>>(xv.size());
  auto inv_std = std::make_shared<std::vector<double>>(static_cast<std::size_t>(groups));
  std::vector<T> out(xv.size());
  for (int g = 0; g < groups; ++g) {
    const long base = g * group_size;
    double mu = 0.0;
    for (long i = 0; i < group_size; ++i) mu += xv[base + i];
    mu /= static_cast<double>(group_size);
    double var = 0.0;
    for (long i = 0; i < group_size; ++i) var += (xv[base + i] - mu) * (xv[base + i] - mu);
    var /= static_cast<double>(group_size);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[g] = is;
    for (long i = 0; i < group_size; ++i) {
      const long idx = base + i;
      const int c = static_cast<int>(idx / plane);
      (*xhat)[idx] = (xv[idx] - mu) * is;
      out[idx] = static_cast<T>(gamma[c] * (*xhat)[idx] + beta[c]);
    }
  }
  return detail::make_result<T>(
      x.shape(), std::move(out), "group_norm", {x, gamma, beta}, [=](Node<T>& node) {
        const auto& g = node.grad;
        const auto& gm = node.parents[1]->data;
        if (detail::wants_grad(node, 1) || detail::wants_grad(node, 2)) {
          std::vector<double> dg(channels, 0.0), db(channels, 0.0);
          for (std::size_t idx = 0; idx < g.size(); ++idx) {
            const int c = static_cast<int>(idx / plane);
            dg[c] += g[idx] * (*xhat)[idx];
            db[c] += g[idx];
          }
          if (detail::wants_grad(node, 1)) {
            auto& ggm = grad_of(node, 1);
            for (int c = 0; c < channels; ++c) ggm[c] += static_cast<T>(dg[c]);
          }
          if (detail::wants_grad(node, 2)) {
            auto& gbt = grad_of(node, 2);
            for (int c = 0; c < channels; ++c) gbt[c] += static_cast<T>(db[c]);
          }
        }
        if (detail::wants_grad(node, 0)) {
          auto& gx = grad_of(node, 0);
          for (int grp = 0; grp < groups; ++grp) {
            const long base = grp * group_size;
            double mean_d = 0.0, mean_dx = 0.0;
            for (long i = 0; i < group_size; ++i) {
              const long idx = base + i;
              const double d = g[idx] * gm[idx / plane];
              mean_d += d;
              mean_dx += d * (*xhat)[idx];
            }
            mean_d /= static_cast<double>(group_size);
            mean_dx /= static_cast<double>(group_size);
            for (long i = 0; i < group_size; ++i) {
              const long idx = base + i;
              const double d = g[idx] * gm[idx / plane];
              gx[idx] += static_cast<T>((*inv_std)[grp] * (d - mean_d - (*xhat)[idx] * mean_dx));
            }
          }
        }
      });
}

namespace {
struct LerpTable {
  std::vector<int> lo, hi;
  std::vector<double> frac;
};

LerpTable lerp_table(int src, int factor) {
  LerpTable t;
  const int dst = src * factor;
  for (int i = 0; i < dst; ++i) {
    const double s = std::clamp((i + 0.5) / factor - 0.5, 0.0, double(src - 1));
    const int l = static_cast<int>(std::floor(s));
    t.lo.push_back(l);
    t.hi.push_back(std::min(l + 1, src - 1));
    t.frac.push_back(s - l);
  }
  return t;
}
}  // namespace

template <typename T>
Tensor<T> upsample_bilinear(const Tensor<T>& x, int factor) {
  require_map(x, "upsample_bilinear");
  if (factor < 1) throw InputError("upsample_bilinear: factor must be >= 1");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  const int ho = h * factor, wo = w * factor;
  const LerpTable ty = lerp_table(h, factor);
  const LerpTable tx = lerp_table(w, factor);
  const auto xv = x.data();
  std::vector<T> out(static_cast<std::size_t>(c) * ho * wo);
  for (int ch = 0; ch < c; ++ch) {
    const T* src = xv.data() + static_cast<long>(ch) * h * w;
    T* dst = out.data() + static_cast<long>(ch) * ho * wo;
    for (int i = 0; i < ho; ++i) {
      const double fy = ty.frac[i];
      const T* r0 = src + static_cast<long>(ty.lo[i]) * w;
      const T* r1 = src + static_cast<long>(ty.hi[i]) * w;
      for (int j = 0; j < wo; ++j) {
        const double fx = tx.frac[j];
        const double top = (1 - fx) * r0[tx.lo[j]] + fx * r0[tx.hi[j]];
        const double bot = (1 - fx) * r1[tx.lo[j]] + fx * r1[tx.hi[j]];
        dst[static_cast<long>(i) * wo + j] = static_cast<T>((1 - fy) * top + fy * bot);
      }
    }
  }
  return detail::make_result<T>({c, ho, wo}, std::move(out), "upsample_bilinear", {x}, [=](Node<T>& node) {
    auto& gx = grad_of(node, 0);
    for (int ch = 0; ch < c; ++ch) {
      T* dst = gx.data() + static_cast<long>(ch) * h * w;
      const T* g = node.grad.data() + static_cast<long>(ch) * ho * wo;
      for (int i = 0; i < ho; ++i) {
        const double fy = ty.frac[i];
        T* r0 = dst + static_cast<long>(ty.lo[i]) * w;
        T* r1 = dst + static_cast<long>(ty.hi[i]) * w;
        for (int j = 0; j < wo; ++j) {
          const double gv = g[static_cast<long>(i) * wo + j];
          const double fx = tx.frac[j];
          r0[tx.lo[j]] += static_cast<T>(gv * (1 - fy) * (1 - fx));
          r0[tx.hi[j]] += static_cast<T>(gv * (1 - fy) * fx);
          r1[tx.lo[j]] += static_cast<T>(gv * fy * (1 - fx));
          r1[tx.hi[j]] += static_cast<T>(gv * fy * fx);
        }
      }
    }
  });
}

template <typename T>
Tensor<T> avg_pool(const Tensor<T>& x, int k) {
  require_map(x, "avg_pool");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (k < 1 || h % k != 0 || w % k != 0) {
    throw DimensionError("avg_pool: window " + std::to_string(k) + " does not tile " + shape_str(x.shape()));
  }
  const int ho = h / k, wo = w / k;
  const double inv = 1.0 / (static_cast<double>(k) * k);
  const auto xv = x.data();
  std::vector<T> out(static_cast<std::size_t>(c) * ho * wo);
  for (int ch = 0; ch < c; ++ch) {
    for (int i = 0; i < ho; ++i) {
      for (int j = 0; j < wo; ++j) {
        double acc = 0.0;
        for (int dy = 0; dy < k; ++dy) {
          for (int dx = 0; dx < k; ++dx) acc += xv[(static_cast<long>(ch) * h + i * k + dy) * w + j * k + dx];
        }
        out[(static_cast<long>(ch) * ho + i) * wo + j] = static_cast<T>(acc * inv);
      }
    }
  }
  return detail::make_result<T>({c, ho, wo}, std::move(out), "avg_pool", {x}, [=](Node<T>& node) {
    auto& gx = grad_of(node, 0);
    for (int ch = 0; ch < c; ++ch) {
      for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) {
          gx[(static_cast<long>(ch) * h + i) * w + j] +=
              static_cast<T>(node.grad[(static_cast<long>(ch) * ho + i / k) * wo + j / k] * inv);
        }
      }
    }
  });
}

template <typename T>
Tensor<T> pad_to(const Tensor<T>& x, int height, int width) {
  require_map(x, "pad_to");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (height < h || width < w) throw DimensionError("pad_to: target smaller than " + shape_str(x.shape()));
  std::vector<T> out(static_cast<std::size_t>(c) * height * width, T(0));
  const auto xv = x.data();
  for (int ch = 0; ch < c; ++ch) {
    for (int i = 0; i < h; ++i) {
      std::copy_n(xv.begin() + (static_cast<long>(ch) * h + i) * w, w,
                  out.begin() + (static_cast<long>(ch) * height + i) * width);
    }
  }
  return detail::make_result<T>({c, height, width}, std::move(out), "pad_to", {x}, [=](Node<T>& node) {
    auto& gx = grad_of(node, 0);
    for (int ch = 0; ch < c; ++ch) {
      for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) {
          gx[(static_cast<long>(ch) * h + i) * w + j] += node.grad[(static_cast<long>(ch) * height + i) * width + j];
        }
      }
    }
  });
}

template <typename T>
Tensor<T> crop_to(const Tensor<T>& x, int height, int width) {
  require_map(x, "crop_to");
  const int c = x.dim(0), h = x.dim(1), w = x.dim(2);
  if (height > h || width > w || height <= 0 || width <= 0) {
    throw DimensionError("crop_to: target larger than " + shape_str(x.shape()));
  }
  std::vector<T> out(static_cast<std::size_t>(c) * height * width);
  const auto xv = x.data();
  for (int ch = 0; ch < c; ++ch) {
    for (int i = 0; i < height; ++i) {
      std::copy_n(xv.begin() + (static_cast<long>(ch) * h + i) * w, width,
                  out.begin() + (static_cast<long>(ch) * height + i) * width);
    }
  }
  return detail::make_result<T>({c, height, width}, std::move(out), "crop_to", {x}, [=](Node<T>& node) {
    auto& gx = grad_of(node, 0);
    for (int ch = 0; ch < c; ++ch) {
      for (int i = 0; i < height; ++i) {
        for (int j = 0; j < width; ++j) {
          gx[(static_cast<long>(ch) * h + i) * w + j] += node.grad[(static_cast<long>(ch) * height + i) * width + j];
        }
      }
    }
  });
}

template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels) {
  require_map(logits, "cross_entropy");
  const int k = logits.dim(0);
  const long plane = static_cast<long>(logits.dim(1)) * logits.dim(2);
  if (static_cast<long>(labels.size()) != plane) {
    throw DimensionError("cross_entropy: " + std::to_string(labels.size()) + " labels for logits " +
                         shape_str(logits.shape()));
  }
  const auto lv = logits.data();
  auto probs = std::make_shared<std::vector<double>>(lv.size());
  double total = 0.0;
  for (long p = 0; p < plane; ++p) {
    const int label = labels[p];
    if (label < 0 || label >= k) throw InputError("cross_entropy: label " + std::to_string(label) + " out of range");
    double mx = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < k; ++c) mx = std::max(mx, double(lv[c * plane + p]));
    double z = 0.0;
    for (int c = 0; c < k; ++c) z += std::exp(lv[c * plane + p] - mx);
    for (int c = 0; c < k; ++c) (*probs)[c * plane + p] = std::exp(lv[c * plane + p] - mx) / z;
    total += std::log(z) + mx - lv[label * plane + p];
  }
  std::vector<int> targets(labels.begin(), labels.end());
  return detail::make_result<T>(
      {1}, {static_cast<T>(total / plane)}, "cross_entropy", {logits},
      [=, targets = std::move(targets)](Node<T>& node) {
        auto& gl = grad_of(node, 0);
        const double g = node.grad[0] / static_cast<double>(plane);
        for (int c = 0; c < k; ++c) {
          for (long p = 0; p < plane; ++p) {
            const long idx = c * plane + p;
            gl[idx] += static_cast<T>(g * ((*probs)[idx] - (targets[p] == c ? 1.0 : 0.0)));
          }
        }
      });
}

template <typename T>
Tensor<T> to_tokens(const Tensor<T>& map) {
  require_map(map, "to_tokens");
  return transpose(reshape(map, {map.dim(0), map.dim(1) * map.dim(2)}));
}

template <typename T>
Tensor<T> from_tokens(const Tensor<T>& tokens, int height, int width) {
  if (tokens.ndim() != 2 || tokens.dim(0) != height * width) {
    throw DimensionError("from_tokens: " + shape_str(tokens.shape()) + " is not " + std::to_string(height) + "x" +
                         std::to_string(width) + " tokens");
  }
  return reshape(transpose(tokens), {tokens.dim(1), height, width});
}

template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias) {
  Tensor<T> y = matmul(x, weight);
  return bias.defined() ? add(y, bias) : y;
}

#define DEVOS_INSTANTIATE_OPS(T)                                                                     \
  template Tensor<T> add(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> sub(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> mul(const Tensor<T>&, const Tensor<T>&);                                        \
  template Tensor<T> scale(const Tensor<T>&, T);                                                     \
  template Tensor<T> add_channel(const Tensor<T>&, const Tensor<T>&);                                \
  template Tensor<T> matmul(const Tensor<T>&, const Tensor<T>&);                                     \
  template Tensor<T> transpose(const Tensor<T>&);                                                    \
  template Tensor<T> reshape(const Tensor<T>&, const Shape&);                                        \
  template Tensor<T> slice(const Tensor<T>&, int, int, int);                                         \
  template Tensor<T> concat(const std::vector<Tensor<T>>&, int);                                     \
  template Tensor<T> softmax(const Tensor<T>&, int);                                                 \
  template Tensor<T> tanh(const Tensor<T>&);                                                         \
  template Tensor<T> relu(const Tensor<T>&);                                                         \
  template Tensor<T> sum(const Tensor<T>&);                                                          \
  template Tensor<T> mean(const Tensor<T>&);                                                         \
  template Tensor<T> bilinear_sample(const Tensor<T>&, const Tensor<T>&);                            \
  template Tensor<T> conv2d(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, int);         \
  template Tensor<T> group_norm(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&, int, double);  \
  template Tensor<T> upsample_bilinear(const Tensor<T>&, int);                                       \
  template Tensor<T> avg_pool(const Tensor<T>&, int);                                                \
  template Tensor<T> pad_to(const Tensor<T>&, int, int);                                             \
  template Tensor<T> crop_to(const Tensor<T>&, int, int);                                            \
  template Tensor<T> cross_entropy(const Tensor<T>&, std::span<const int>);                          \
  template Tensor<T> to_tokens(const Tensor<T>&);                                                    \
  template Tensor<T> from_tokens(const Tensor<T>&, int, int);                                        \
  template Tensor<T> linear(const Tensor<T>&, const Tensor<T>&, const Tensor<T>&);

DEVOS_INSTANTIATE_OPS(float)
DEVOS_INSTANTIATE_OPS(double)

}  // namespace devos
