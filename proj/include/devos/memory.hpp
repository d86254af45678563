#pragma once

// Long-term memory: a bounded FIFO of memorized frames (frame 0 pinned), a
// dense multi-head readout over the stacked stride-16/32 tokens of every
// entry, and the fusion of short- and long-term matching results.

#include <array>
#include <deque>
#include <vector>

#include "devos/encoders.hpp"
#include "devos/nn.hpp"

namespace devos {

inline constexpr int kMemoryCapacity = 16;
inline constexpr int kMemorizeEvery = 5;

// Levels read from memory: stride 16 and stride 32.
inline constexpr std::array<int, 2> kMemoryLevels{1, 2};

template <typename T>
struct MemoryEntry {
  int frame_index = 0;
  Tensor<T> keys;    // [N16 + N32, C] image feature tokens
  Tensor<T> values;  // [N16 + N32, C] image + mask embedding tokens

  long token_count() const { return keys.defined() ? keys.dim(0) : 0; }
};

// Stacks the stride-16/32 tokens of a frame's features and mask embedding.
template <typename T>
MemoryEntry<T> make_entry(int frame_index, const FeaturePyramid<T>& features, const MaskEmbedding<T>& mask);

struct MemoryPolicy {
  int capacity = kMemoryCapacity;
  int every = kMemorizeEvery;
  void validate() const;
};

template <typename T>
class MemoryBank {
 public:
  explicit MemoryBank(MemoryPolicy policy = {});

  static bool should_memorize(int frame_index, const MemoryPolicy& policy) {
    return frame_index == 0 || frame_index % policy.every == 0;
  }

  // Inserts iff the policy selects the frame. Throws UsageError if an entry
  // with the same frame index is already held. Returns whether it inserted.
  bool maybe_memorize(MemoryEntry<T> entry);

  const std::deque<MemoryEntry<T>>& entries() const { return entries_; }
  int size() const { return static_cast<int>(entries_.size()); }
  bool empty() const { return entries_.empty(); }
  std::vector<int> frame_indices() const;
  long token_count() const;
  // Bytes held by key and value storage.
  long storage_bytes() const { return token_count() * 2 * (empty() ? 0 : entries_.front().keys.dim(1)) * sizeof(T); }
  const MemoryPolicy& policy() const { return policy_; }

 private:
  MemoryPolicy policy_;
  std::deque<MemoryEntry<T>> entries_;  // front is frame 0 once inserted
};

template <typename T>
struct ReadoutTrace {
  std::vector<Tensor<T>> weights;  // per head, [Nq, Nm]
};

template <typename T>
class LongTermReadout {
 public:
  LongTermReadout() = default;
  LongTermReadout(Initializer& init, int embed_dim, int heads);

  // Level 0 passes through; levels 1-2 hold the attention output (no
  // residual, fusion adds it).
  FeaturePyramid<T> operator()(const FeaturePyramid<T>& query, const MemoryBank<T>& bank,
                               ReadoutTrace<T>* trace = nullptr) const;
  // Same, over an explicit token set [Nm, C].
  FeaturePyramid<T> attend(const FeaturePyramid<T>& query, const Tensor<T>& keys, const Tensor<T>& values,
                           ReadoutTrace<T>* trace = nullptr) const;

  Linear<T>& query_proj() { return q_; }
  Linear<T>& key_proj() { return k_; }
  Linear<T>& value_proj() { return v_; }
  Linear<T>& out_proj() { return o_; }
  int heads() const { return heads_; }
  void collect(const std::string& prefix, ParamList<T>& out) const;

 private:
  Linear<T> q_, k_, v_, o_;
  int heads_ = 1;
};

// query + W_l [short ; long] per level.
template <typename T>
class Fusion {
 public:
  Fusion() = default;
  Fusion(Initializer& init, int embed_dim);

  FeaturePyramid<T> operator()(const FeaturePyramid<T>& query, const FeaturePyramid<T>& short_term,
                               const FeaturePyramid<T>& long_term) const;
  Linear<T>& projection(int level) { return proj_[level]; }
  void collect(const std::string& prefix, ParamList<T>& out) const;

 private:
  std::array<Linear<T>, kNumLevels> proj_;
};

}  // namespace devos
