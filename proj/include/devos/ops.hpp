#pragma once

// Differentiable primitives. Every function records its backward closure on
// the returned tensor when an input is tracked. Reductions and products
// accumulate in double regardless of the storage scalar.
//
// Spatial maps use the [C, H, W] layout; point lists use (row, col) order.

#include <span>
#include <vector>

#include "devos/tensor.hpp"

namespace devos {

// Elementwise; `b` may equal a's shape or a trailing suffix of it (broadcast).
template <typename T> Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b);
template <typename T> Tensor<T> scale(const Tensor<T>& a, T factor);

// x[C, ...] + bias[C] broadcast over trailing dimensions.
template <typename T> Tensor<T> add_channel(const Tensor<T>& x, const Tensor<T>& bias);

// a[.., M, K] x b[.., K, N]. Batch dims must agree, or one side is 2-D and
// broadcasts over the other's batch.
template <typename T> Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b);
// Swaps the last two dimensions.
template <typename T> Tensor<T> transpose(const Tensor<T>& a);
template <typename T> Tensor<T> reshape(const Tensor<T>& a, const Shape& shape);
template <typename T> Tensor<T> slice(const Tensor<T>& a, int axis, int begin, int end);
template <typename T> Tensor<T> concat(const std::vector<Tensor<T>>& parts, int axis);

template <typename T> Tensor<T> softmax(const Tensor<T>& x, int axis = -1);
// Output lies strictly inside (-1, 1) even where float tanh would round to +-1.
template <typename T> Tensor<T> tanh(const Tensor<T>& x);
template <typename T> Tensor<T> relu(const Tensor<T>& x);

template <typename T> Tensor<T> sum(const Tensor<T>& x);
template <typename T> Tensor<T> mean(const Tensor<T>& x);

// Samples feature[C, H, W] at fractional (row, col) points[P, 2] -> [P, C].
// Coordinates are clamped to the grid; the coordinate gradient is zero on
// any axis where clamping was active.
template <typename T> Tensor<T> bilinear_sample(const Tensor<T>& feature, const Tensor<T>& points);

// x[Cin, H, W], weight[Cout, Cin, k, k], optional bias[Cout].
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias, int stride, int padding);

template <typename T>
Tensor<T> group_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, int groups,
                     double eps = 1e-5);

// Half-pixel-centered bilinear upsampling of [C, H, W] by an integer factor.
template <typename T> Tensor<T> upsample_bilinear(const Tensor<T>& x, int factor);
// Non-overlapping average pooling of [C, H, W] with window = stride = k.
template <typename T> Tensor<T> avg_pool(const Tensor<T>& x, int k);

// Zero padding at bottom/right, and the matching crop.
template <typename T> Tensor<T> pad_to(const Tensor<T>& x, int height, int width);
template <typename T> Tensor<T> crop_to(const Tensor<T>& x, int height, int width);

// Mean per-pixel cross-entropy of logits[K, H, W] against labels (H*W, values in [0, K)).
template <typename T> Tensor<T> cross_entropy(const Tensor<T>& logits, std::span<const int> labels);

// [C, H, W] <-> [H*W, C]
template <typename T> Tensor<T> to_tokens(const Tensor<T>& map);
template <typename T> Tensor<T> from_tokens(const Tensor<T>& tokens, int height, int width);

// x[N, in] W[in, out] + b[out]; bias optional.
template <typename T> Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& weight, const Tensor<T>& bias);

}  // namespace devos
