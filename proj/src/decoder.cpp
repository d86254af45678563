#include "devos/decoder.hpp"

namespace devos {

template <typename T>
Decoder<T>::Decoder(Initializer& init, int embed_dim, const std::array<int, kNumLevels>& skip_channels) {
  if (embed_dim % kDecoderGroups != 0) {
    throw InputError("decoder width " + std::to_string(embed_dim) + " is not divisible by 8 groups");
  }
  for (int l = 0; l < kNumLevels; ++l) {
    lateral_[l] = Conv2d<T>(init, skip_channels[l], embed_dim, 1, 1, 0);
    smooth_[l] = Conv2d<T>(init, embed_dim, embed_dim, 3, 1, 1);
    gamma_[l] = Tensor<T>::full({embed_dim}, T(1), true);
    beta_[l] = Tensor<T>::zeros({embed_dim}, true);
  }
  head_ = Conv2d<T>(init, embed_dim, kNumClasses, 1, 1, 0);
}

template <typename T>
Tensor<T> Decoder<T>::operator()(const FeaturePyramid<T>& fused, const std::array<Tensor<T>, kNumLevels>& skip) const {
  for (int l = 0; l < kNumLevels; ++l) {
    if (fused.levels[l].dim(1) != skip[l].dim(1) || fused.levels[l].dim(2) != skip[l].dim(2)) {
      throw InputError("decoder: level " + std::to_string(l) + " fused " + shape_str(fused.levels[l].shape()) +
                       " vs skip " + shape_str(skip[l].shape()));
    }
    if (l > 0 && (fused.levels[l - 1].dim(1) != 2 * fused.levels[l].dim(1) ||
                  fused.levels[l - 1].dim(2) != 2 * fused.levels[l].dim(2))) {
      throw InputError("decoder: levels " + std::to_string(l - 1) + " and " + std::to_string(l) +
                       " are not a factor 2 apart");
    }
  }
  Tensor<T> top;
  for (int l = kNumLevels - 1; l >= 0; --l) {
    Tensor<T> merged = add(fused.levels[l], lateral_[l](skip[l]));
    if (top.defined()) merged = add(merged, upsample_bilinear(top, 2));
    top = relu(group_norm(smooth_[l](merged), gamma_[l], beta_[l], kDecoderGroups));
  }
  return upsample_bilinear(head_(top), kLevelStrides[0]);
}

template <typename T>
void Decoder<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  for (int l = 0; l < kNumLevels; ++l) {
    const std::string p = prefix + ".level" + std::to_string(l);
    lateral_[l].collect(p + ".lateral", out);
    smooth_[l].collect(p + ".smooth", out);
    out.push_back({p + ".gn.gamma", gamma_[l]});
    out.push_back({p + ".gn.beta", beta_[l]});
  }
  head_.collect(prefix + ".head", out);
}

template <typename T>
ObjectMask logits_to_mask(const Tensor<T>& logits) {
  if (logits.ndim() != 3 || logits.dim(0) != kNumClasses) {
    throw DimensionError("logits must be [16,H,W], got " + shape_str(logits.shape()));
  }
  const int h = logits.dim(1), w = logits.dim(2);
  const long plane = static_cast<long>(h) * w;
  const auto v = logits.data();
  std::vector<std::uint8_t> labels(static_cast<std::size_t>(plane));
  for (long p = 0; p < plane; ++p) {
    int best = 0;
    for (int k = 1; k < kNumClasses; ++k) {
      if (v[k * plane + p] > v[best * plane + p]) best = k;
    }
    labels[p] = static_cast<std::uint8_t>(best);
  }
  return ObjectMask(h, w, std::move(labels));
}

template class Decoder<float>;
template class Decoder<double>;
template ObjectMask logits_to_mask<float>(const Tensor<float>&);
template ObjectMask logits_to_mask<double>(const Tensor<double>&);

}  // namespace devos
