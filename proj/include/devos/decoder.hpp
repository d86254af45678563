#pragma once

// FPN-style top-down decoder: fused matching features plus lateral encoder
// skips, merged coarse to fine with GroupNorm, then a 1x1 class head and x8
// bilinear upsampling to input resolution.

#include <array>

#include "devos/encoders.hpp"
#include "devos/nn.hpp"

namespace devos {

inline constexpr int kDecoderGroups = 8;

template <typename T>
class Decoder {
 public:
  Decoder() = default;
  // `embed_dim` must be divisible by the 8 GroupNorm groups.
  Decoder(Initializer& init, int embed_dim, const std::array<int, kNumLevels>& skip_channels);

  // Returns [16, 8*H_0, 8*W_0] logits.
  Tensor<T> operator()(const FeaturePyramid<T>& fused, const std::array<Tensor<T>, kNumLevels>& skip) const;

  Conv2d<T>& head() { return head_; }
  Conv2d<T>& lateral(int level) { return lateral_[level]; }
  void collect(const std::string& prefix, ParamList<T>& out) const;

 private:
  std::array<Conv2d<T>, kNumLevels> lateral_;
  std::array<Conv2d<T>, kNumLevels> smooth_;
  std::array<Tensor<T>, kNumLevels> gamma_, beta_;
  Conv2d<T> head_;
};

// Per-pixel argmax of [16, H, W] logits; ties go to the smaller class.
template <typename T>
ObjectMask logits_to_mask(const Tensor<T>& logits);

}  // namespace devos
