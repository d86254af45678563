#include "devos/memory.hpp"

#include <algorithm>
#include <cmath>

namespace devos {

template <typename T>
MemoryEntry<T> make_entry(int frame_index, const FeaturePyramid<T>& features, const MaskEmbedding<T>& mask) {
  MemoryEntry<T> e;
  e.frame_index = frame_index;
  std::vector<Tensor<T>> keys, values;
  for (int l : kMemoryLevels) {
    if (features.levels[l].shape() != mask.levels[l].shape()) {
      throw DimensionError("memory entry: feature " + shape_str(features.levels[l].shape()) + " vs mask " +
                           shape_str(mask.levels[l].shape()));
    }
    Tensor<T> k = to_tokens(features.levels[l]);
    keys.push_back(k);
    values.push_back(add(k, to_tokens(mask.levels[l])));
  }
  e.keys = concat(keys, 0);
  e.values = concat(values, 0);
  return e;
}

void MemoryPolicy::validate() const {
  if (capacity < 1) throw InputError("memory capacity must be >= 1");
  if (every < 1) throw InputError("memorize interval must be >= 1");
}

template <typename T>
MemoryBank<T>::MemoryBank(MemoryPolicy policy) : policy_(policy) {
  policy_.validate();
}

template <typename T>
bool MemoryBank<T>::maybe_memorize(MemoryEntry<T> entry) {
  for (const auto& e : entries_) {
    if (e.frame_index == entry.frame_index) {
      throw UsageError("frame " + std::to_string(entry.frame_index) + " is already memorized");
    }
  }
  if (!should_memorize(entry.frame_index, policy_)) return false;
  if (!entries_.empty() && entry.keys.shape() != entries_.front().keys.shape()) {
    throw DimensionError("memory entry token shape " + shape_str(entry.keys.shape()) + " differs from bank " +
                         shape_str(entries_.front().keys.shape()));
  }
  entries_.push_back(std::move(entry));
  if (size() > policy_.capacity) {
    // Oldest non-pinned entry; the pinned frame 0 stays at the front.
    const bool pinned = entries_.front().frame_index == 0;
    if (pinned && size() > 1) {
      entries_.erase(entries_.begin() + 1);
    } else {
      entries_.pop_front();
    }
  }
  return true;
}

template <typename T>
std::vector<int> MemoryBank<T>::frame_indices() const {
  std::vector<int> out;
  for (const auto& e : entries_) out.push_back(e.frame_index);
  return out;
}

template <typename T>
long MemoryBank<T>::token_count() const {
  long n = 0;
  for (const auto& e : entries_) n += e.token_count();
  return n;
}

// ---------------------------------------------------------------------------

template <typename T>
LongTermReadout<T>::LongTermReadout(Initializer& init, int embed_dim, int heads)
    : q_(init, embed_dim, embed_dim),
      k_(init, embed_dim, embed_dim),
      v_(init, embed_dim, embed_dim),
      o_(init, embed_dim, embed_dim),
      heads_(heads) {
  if (heads <= 0 || embed_dim % heads != 0) throw InputError("readout heads must divide embed_dim");
}

template <typename T>
FeaturePyramid<T> LongTermReadout<T>::operator()(const FeaturePyramid<T>& query, const MemoryBank<T>& bank,
                                                 ReadoutTrace<T>* trace) const {
  if (bank.empty()) throw UsageError("long-term readout from an empty memory bank");
  std::vector<Tensor<T>> keys, values;
  for (const auto& e : bank.entries()) {
    keys.push_back(e.keys);
    values.push_back(e.values);
  }
  return attend(query, keys.size() == 1 ? keys[0] : concat(keys, 0), values.size() == 1 ? values[0] : concat(values, 0),
                trace);
}

template <typename T>
FeaturePyramid<T> LongTermReadout<T>::attend(const FeaturePyramid<T>& query, const Tensor<T>& keys,
                                             const Tensor<T>& values, ReadoutTrace<T>* trace) const {
  const int c = q_.in_features();
  const int d = c / heads_;
  if (keys.ndim() != 2 || keys.dim(1) != c || values.shape() != keys.shape()) {
    throw DimensionError("memory tokens must be [N," + std::to_string(c) + "], got " + shape_str(keys.shape()));
  }
  std::vector<Tensor<T>> tokens;
  for (int l : kMemoryLevels) {
    if (query.levels[l].dim(0) != c) throw DimensionError("readout query channel mismatch");
    tokens.push_back(to_tokens(query.levels[l]));
  }
  Tensor<T> q = q_(concat(tokens, 0));
  Tensor<T> k = k_(keys);
  Tensor<T> v = v_(values);
  const T inv_sqrt_d = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));
  if (trace) trace->weights.clear();
  std::vector<Tensor<T>> heads;
  for (int h = 0; h < heads_; ++h) {
    Tensor<T> qh = slice(q, 1, h * d, (h + 1) * d);
    Tensor<T> kh = slice(k, 1, h * d, (h + 1) * d);
    Tensor<T> vh = slice(v, 1, h * d, (h + 1) * d);
    Tensor<T> w = softmax(scale(matmul(qh, transpose(kh)), inv_sqrt_d), -1);
    if (trace) trace->weights.push_back(w);
    heads.push_back(matmul(w, vh));
  }
  Tensor<T> out = o_(heads_ == 1 ? heads[0] : concat(heads, 1));

  FeaturePyramid<T> result;
  result.levels[0] = query.levels[0];
  int row = 0;
  for (int l : kMemoryLevels) {
    const int h = query.levels[l].dim(1), w = query.levels[l].dim(2);
    result.levels[l] = from_tokens(slice(out, 0, row, row + h * w), h, w);
    row += h * w;
  }
  return result;
}

template <typename T>
void LongTermReadout<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  q_.collect(prefix + ".q", out);
  k_.collect(prefix + ".k", out);
  v_.collect(prefix + ".v", out);
  o_.collect(prefix + ".out", out);
}

// ---------------------------------------------------------------------------

template <typename T>
Fusion<T>::Fusion(Initializer& init, int embed_dim) {
  for (int l = 0; l < kNumLevels; ++l) proj_[l] = Linear<T>(init, 2 * embed_dim, embed_dim);
}

template <typename T>
FeaturePyramid<T> Fusion<T>::operator()(const FeaturePyramid<T>& query, const FeaturePyramid<T>& short_term,
                                        const FeaturePyramid<T>& long_term) const {
  FeaturePyramid<T> out;
  for (int l = 0; l < kNumLevels; ++l) {
    const Tensor<T>& q = query.levels[l];
    if (short_term.levels[l].shape() != q.shape() || long_term.levels[l].shape() != q.shape()) {
      throw InputError("fuse: level " + std::to_string(l) + " shapes " + shape_str(short_term.levels[l].shape()) +
                       " / " + shape_str(long_term.levels[l].shape()) + " vs query " + shape_str(q.shape()));
    }
    Tensor<T> both = concat<T>({to_tokens(short_term.levels[l]), to_tokens(long_term.levels[l])}, 1);
    out.levels[l] = add(q, from_tokens(proj_[l](both), q.dim(1), q.dim(2)));
  }
  return out;
}

template <typename T>
void Fusion<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  for (int l = 0; l < kNumLevels; ++l) proj_[l].collect(prefix + ".level" + std::to_string(l), out);
}

template MemoryEntry<float> make_entry<float>(int, const FeaturePyramid<float>&, const MaskEmbedding<float>&);
template MemoryEntry<double> make_entry<double>(int, const FeaturePyramid<double>&, const MaskEmbedding<double>&);
template class MemoryBank<float>;
template class MemoryBank<double>;
template class LongTermReadout<float>;
template class LongTermReadout<double>;
template class Fusion<float>;
template class Fusion<double>;

}  // namespace devos
