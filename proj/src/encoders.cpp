#include "devos/encoders.hpp"

#include <algorithm>
#include <numeric>
#include <random>

namespace devos {

ObjectMask::ObjectMask(int height, int width, std::vector<std::uint8_t> labels)
    : height_(height), width_(width), labels_(std::move(labels)) {
  if (height <= 0 || width <= 0 || static_cast<long>(labels_.size()) != static_cast<long>(height) * width) {
    throw InputError("ObjectMask: " + std::to_string(labels_.size()) + " labels for " + std::to_string(height) + "x" +
                     std::to_string(width));
  }
  for (auto l : labels_) {
    if (l > kMaxObjects) throw InputError("ObjectMask: label " + std::to_string(l) + " exceeds 15");
  }
}

void ObjectMask::set(int y, int x, std::uint8_t label) {
  if (label > kMaxObjects) throw InputError("ObjectMask: label " + std::to_string(label) + " exceeds 15");
  labels_[static_cast<std::size_t>(y) * width_ + x] = label;
}

std::vector<int> ObjectMask::object_ids() const {
  std::array<bool, kNumClasses> seen{};
  for (auto l : labels_) seen[l] = true;
  std::vector<int> ids;
  for (int k = 1; k < kNumClasses; ++k) {
    if (seen[k]) ids.push_back(k);
  }
  return ids;
}

LabelPermutation identity_permutation() {
  LabelPermutation p{};
  std::iota(p.begin(), p.end(), std::uint8_t{0});
  return p;
}

LabelPermutation invert(const LabelPermutation& perm) {
  LabelPermutation inv{};
  for (int k = 0; k < kNumClasses; ++k) inv[perm[k]] = static_cast<std::uint8_t>(k);
  return inv;
}

ObjectMask apply_permutation(const ObjectMask& mask, const LabelPermutation& perm) {
  std::vector<std::uint8_t> out(mask.labels().size());
  std::transform(mask.labels().begin(), mask.labels().end(), out.begin(), [&](std::uint8_t l) { return perm[l]; });
  return ObjectMask(mask.height(), mask.width(), std::move(out));
}

std::pair<ObjectMask, LabelPermutation> shuffle_channels(const ObjectMask& mask, std::uint64_t seed) {
  LabelPermutation perm = identity_permutation();
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin() + 1, perm.end(), rng);
  return {apply_permutation(mask, perm), perm};
}

void require_encodable(int height, int width) {
  if (height < 32 || width < 32 || height % 32 != 0 || width % 32 != 0) {
    throw InputError("encoder input must be a positive multiple of 32 on both sides, got " + std::to_string(height) +
                     "x" + std::to_string(width));
  }
}

template <typename T>
Tensor<T> image_tensor(const Image& frame) {
  std::vector<T> v(frame.pixels.begin(), frame.pixels.end());
  return Tensor<T>({3, frame.height, frame.width}, std::move(v));
}

// ---------------------------------------------------------------------------

template <typename T>
ConvStack<T>::ConvStack(Initializer& init, const ConvStackConfig& cfg) : widths_(cfg.widths) {
  stem_ = Conv2d<T>(init, cfg.in_channels, cfg.stem, 3, 2, 1);
  int in = cfg.stem;
  for (int i = 0; i < 4; ++i) {
    stages_[i] = Conv2d<T>(init, in, cfg.widths[i], 3, 2, 1);
    in = cfg.widths[i];
  }
}

template <typename T>
std::array<Tensor<T>, kNumLevels> ConvStack<T>::operator()(const Tensor<T>& x) const {
  Tensor<T> h = relu(stem_(x));
  std::array<Tensor<T>, kNumLevels> out;
  for (int i = 0; i < 4; ++i) {
    h = relu(stages_[i](h));
    if (i >= 1) out[i - 1] = h;
  }
  return out;
}

template <typename T>
void ConvStack<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  stem_.collect(prefix + ".stem", out);
  for (int i = 0; i < 4; ++i) stages_[i].collect(prefix + ".stage" + std::to_string(i + 1), out);
}

// ---------------------------------------------------------------------------

template <typename T>
LevelProjection<T>::LevelProjection(Initializer& init, const std::array<int, kNumLevels>& in_channels, int embed_dim,
                                    int grid_height, int grid_width, bool positional, bool scale_embedding) {
  for (int l = 0; l < kNumLevels; ++l) {
    proj_[l] = Linear<T>(init, in_channels[l], embed_dim);
    if (positional) {
      const auto [h, w] = level_size(grid_height, grid_width, l);
      pos_[l] = init.normal<T>({embed_dim, h, w}, 0.02);
    }
    if (scale_embedding) scale_[l] = init.normal<T>({embed_dim}, 0.02);
  }
}

template <typename T>
Tensor<T> LevelProjection<T>::project(int level, const Tensor<T>& map) const {
  return from_tokens(proj_[level](to_tokens(map)), map.dim(1), map.dim(2));
}

template <typename T>
Tensor<T> LevelProjection<T>::add_embeddings(int level, const Tensor<T>& map) const {
  Tensor<T> out = map;
  if (pos_[level].defined()) {
    const Tensor<T>& table = pos_[level];
    const int h = map.dim(1), w = map.dim(2);
    if (table.dim(1) == h && table.dim(2) == w) {
      out = add(out, table);
    } else {
      const int th = table.dim(1), tw = table.dim(2);
      std::vector<T> pts;
      pts.reserve(static_cast<std::size_t>(h) * w * 2);
      for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) {
          pts.push_back(static_cast<T>((i + 0.5) * th / h - 0.5));
          pts.push_back(static_cast<T>((j + 0.5) * tw / w - 0.5));
        }
      }
      Tensor<T> sampled = bilinear_sample(table, Tensor<T>({h * w, 2}, std::move(pts)));
      out = add(out, from_tokens(sampled, h, w));
    }
  }
  if (scale_[level].defined()) out = add_channel(out, scale_[level]);
  return out;
}

template <typename T>
FeaturePyramid<T> LevelProjection<T>::operator()(const std::array<Tensor<T>, kNumLevels>& raw) const {
  FeaturePyramid<T> p;
  for (int l = 0; l < kNumLevels; ++l) p.levels[l] = add_embeddings(l, project(l, raw[l]));
  return p;
}

template <typename T>
void LevelProjection<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  for (int l = 0; l < kNumLevels; ++l) {
    const std::string p = prefix + ".level" + std::to_string(l);
    proj_[l].collect(p + ".proj", out);
    if (pos_[l].defined()) out.push_back({p + ".pos", pos_[l]});
    if (scale_[l].defined()) out.push_back({p + ".scale", scale_[l]});
  }
}

// ---------------------------------------------------------------------------

template <typename T>
ImageEncoder<T>::ImageEncoder(Initializer& init, const ConvStackConfig& backbone, int embed_dim, int grid_height,
                              int grid_width, bool scale_embedding)
    : backbone_(init, backbone),
      projection_(init, backbone_.level_channels(), embed_dim, grid_height, grid_width, true, scale_embedding) {}

template <typename T>
EncodedImage<T> ImageEncoder<T>::operator()(const Image& frame) const {
  return (*this)(image_tensor<T>(frame));
}

template <typename T>
EncodedImage<T> ImageEncoder<T>::operator()(const Tensor<T>& rgb) const {
  require_encodable(rgb.dim(1), rgb.dim(2));
  EncodedImage<T> out;
  out.skip = backbone_(rgb);
  out.features = projection_(out.skip);
  return out;
}

template <typename T>
void ImageEncoder<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  backbone_.collect(prefix + ".backbone", out);
  projection_.collect(prefix + ".projection", out);
}

// ---------------------------------------------------------------------------

template <typename T>
MaskEncoder<T>::MaskEncoder(Initializer& init, const ConvStackConfig& stack, int embed_dim) : stack_(init, stack) {
  const auto ch = stack_.level_channels();
  for (int l = 0; l < kNumLevels; ++l) proj_[l] = Linear<T>(init, ch[l], embed_dim);
}

template <typename T>
MaskEmbedding<T> MaskEncoder<T>::operator()(const ObjectMask& mask) const {
  return (*this)(mask.onehot<T>());
}

template <typename T>
MaskEmbedding<T> MaskEncoder<T>::operator()(const Tensor<T>& onehot) const {
  if (onehot.ndim() != 3 || onehot.dim(0) != kMaxObjects) {
    throw DimensionError("mask encoder expects [15,H,W], got " + shape_str(onehot.shape()));
  }
  require_encodable(onehot.dim(1), onehot.dim(2));
  const auto raw = stack_(onehot);
  MaskEmbedding<T> out;
  for (int l = 0; l < kNumLevels; ++l) {
    out.levels[l] = from_tokens(proj_[l](to_tokens(raw[l])), raw[l].dim(1), raw[l].dim(2));
  }
  return out;
}

template <typename T>
void MaskEncoder<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  stack_.collect(prefix + ".stack", out);
  for (int l = 0; l < kNumLevels; ++l) proj_[l].collect(prefix + ".proj" + std::to_string(l), out);
}

template Tensor<float> image_tensor<float>(const Image&);
template Tensor<double> image_tensor<double>(const Image&);
template class ConvStack<float>;
template class ConvStack<double>;
template class LevelProjection<float>;
template class LevelProjection<double>;
template class ImageEncoder<float>;
template class ImageEncoder<double>;
template class MaskEncoder<float>;
template class MaskEncoder<double>;

}  // namespace devos
