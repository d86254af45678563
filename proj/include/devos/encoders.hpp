#pragma once

// Image/mask encoders producing the three-level (stride 8/16/32) pyramid in a
// shared C-dimensional embedding space.

#include <array>
#include <cstdint>
#include <utility>
#include <vector>

#include "devos/nn.hpp"

namespace devos {

inline constexpr int kMaxObjects = 15;
inline constexpr int kNumClasses = kMaxObjects + 1;
inline constexpr int kNumLevels = 3;
inline constexpr std::array<int, kNumLevels> kLevelStrides{8, 16, 32};

// Planar RGB, values in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  std::vector<float> pixels;  // [3, H, W]

  float at(int c, int y, int x) const { return pixels[(static_cast<std::size_t>(c) * height + y) * width + x]; }
};

class ObjectMask {
 public:
  ObjectMask() = default;
  ObjectMask(int height, int width, std::vector<std::uint8_t> labels);
  static ObjectMask background(int height, int width) {
    return ObjectMask(height, width, std::vector<std::uint8_t>(static_cast<std::size_t>(height) * width, 0));
  }

  int height() const { return height_; }
  int width() const { return width_; }
  const std::vector<std::uint8_t>& labels() const { return labels_; }
  std::uint8_t at(int y, int x) const { return labels_[static_cast<std::size_t>(y) * width_ + x]; }
  void set(int y, int x, std::uint8_t label);
  std::vector<int> object_ids() const;  // sorted, background excluded

  // [15, H, W]; channel k-1 is active where the label equals k.
  template <typename T>
  Tensor<T> onehot() const {
    std::vector<T> v(static_cast<std::size_t>(kMaxObjects) * labels_.size(), T(0));
    for (std::size_t i = 0; i < labels_.size(); ++i) {
      if (labels_[i] > 0) v[(labels_[i] - 1) * labels_.size() + i] = T(1);
    }
    return Tensor<T>({kMaxObjects, height_, width_}, std::move(v));
  }

  bool operator==(const ObjectMask&) const = default;

 private:
  int height_ = 0;
  int width_ = 0;
  std::vector<std::uint8_t> labels_;
};

// perm[label] -> new label; perm[0] == 0.
using LabelPermutation = std::array<std::uint8_t, kNumClasses>;

LabelPermutation identity_permutation();
LabelPermutation invert(const LabelPermutation& perm);
ObjectMask apply_permutation(const ObjectMask& mask, const LabelPermutation& perm);
// Uniform random permutation of the object labels 1..15 (background fixed).
std::pair<ObjectMask, LabelPermutation> shuffle_channels(const ObjectMask& mask, std::uint64_t seed);

template <typename T>
struct FeaturePyramid {
  std::array<Tensor<T>, kNumLevels> levels;  // each [C, H_l, W_l]

  int channels() const { return levels[0].dim(0); }
  int height(int l) const { return levels[l].dim(1); }
  int width(int l) const { return levels[l].dim(2); }
};

template <typename T>
using MaskEmbedding = FeaturePyramid<T>;

// Spatial size of level l for a (padded) input of the given size.
inline std::pair<int, int> level_size(int height, int width, int level) {
  const int s = kLevelStrides[level];
  return {(height + s - 1) / s, (width + s - 1) / s};
}

// Throws InputError unless both sides are positive multiples of 32.
void require_encodable(int height, int width);

struct ConvStackConfig {
  int in_channels = 3;
  int stem = 16;
  std::array<int, 4> widths{32, 64, 128, 256};
};

// Stride-2 stem followed by four stride-2 conv+ReLU stages; the last three
// stage outputs are the stride 8/16/32 features.
template <typename T>
class ConvStack {
 public:
  ConvStack() = default;
  ConvStack(Initializer& init, const ConvStackConfig& cfg);

  std::array<Tensor<T>, kNumLevels> operator()(const Tensor<T>& x) const;
  // Stem activation only.
  Tensor<T> first_layer(const Tensor<T>& x) const { return relu(stem_(x)); }
  std::array<int, kNumLevels> level_channels() const { return {widths_[1], widths_[2], widths_[3]}; }
  const Conv2d<T>& stem() const { return stem_; }
  void collect(const std::string& prefix, ParamList<T>& out) const;

 private:
  Conv2d<T> stem_;
  std::array<Conv2d<T>, 4> stages_;
  std::array<int, 4> widths_{};
};

// Per-level linear maps into the common space, plus the learnable positional
// (per level, per position) and scale-level embeddings.
template <typename T>
class LevelProjection {
 public:
  LevelProjection() = default;
  // `grid_height`/`grid_width` size the positional tables (the model's
  // nominal padded frame size); other sizes resample them bilinearly.
  LevelProjection(Initializer& init, const std::array<int, kNumLevels>& in_channels, int embed_dim,
                  int grid_height, int grid_width, bool positional = true, bool scale_embedding = true);

  // Linear projection only (no embeddings).
  Tensor<T> project(int level, const Tensor<T>& map) const;
  // Adds pi_l (resampled to the map's size) and omega_l.
  Tensor<T> add_embeddings(int level, const Tensor<T>& map) const;
  FeaturePyramid<T> operator()(const std::array<Tensor<T>, kNumLevels>& raw) const;

  const Linear<T>& projection(int level) const { return proj_[level]; }
  const Tensor<T>& positional(int level) const { return pos_[level]; }
  const Tensor<T>& scale_embedding(int level) const { return scale_[level]; }
  Linear<T>& projection(int level) { return proj_[level]; }
  void collect(const std::string& prefix, ParamList<T>& out) const;

 private:
  std::array<Linear<T>, kNumLevels> proj_;
  std::array<Tensor<T>, kNumLevels> pos_;
  std::array<Tensor<T>, kNumLevels> scale_;
};

template <typename T>
struct EncodedImage {
  FeaturePyramid<T> features;           // projected + embeddings
  std::array<Tensor<T>, kNumLevels> skip;  // raw backbone maps, for the decoder
};

template <typename T>
class ImageEncoder {
 public:
  ImageEncoder() = default;
  ImageEncoder(Initializer& init, const ConvStackConfig& backbone, int embed_dim, int grid_height, int grid_width,
               bool scale_embedding);

  EncodedImage<T> operator()(const Image& frame) const;
  EncodedImage<T> operator()(const Tensor<T>& rgb) const;
  std::array<int, kNumLevels> skip_channels() const { return backbone_.level_channels(); }
  const LevelProjection<T>& projection() const { return projection_; }
  LevelProjection<T>& projection() { return projection_; }
  void collect(const std::string& prefix, ParamList<T>& out) const;

 private:
  ConvStack<T> backbone_;
  LevelProjection<T> projection_;
};

template <typename T>
class MaskEncoder {
 public:
  MaskEncoder() = default;
  MaskEncoder(Initializer& init, const ConvStackConfig& stack, int embed_dim);

  MaskEmbedding<T> operator()(const ObjectMask& mask) const;
  // Accepts a (possibly soft) [15, H, W] occupancy map.
  MaskEmbedding<T> operator()(const Tensor<T>& onehot) const;
  const ConvStack<T>& stack() const { return stack_; }
  void collect(const std::string& prefix, ParamList<T>& out) const;

 private:
  ConvStack<T> stack_;
  std::array<Linear<T>, kNumLevels> proj_;
};

template <typename T>
Tensor<T> image_tensor(const Image& frame);

}  // namespace devos
