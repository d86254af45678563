#pragma once

// Multi-head, multi-scale deformable attention.
//
// In cross mode (the video attention), each query of the current frame
// samples N_k keys/values per head per scale from the previous frame at
//
//     reference + flow_offset + semantic_offset
//
// where the flow offset is predicted from the inverse optical flow (bounded
// by the level extent D through D*tanh) and the semantic offset from the query
// itself (bounded by the level window sigma_l through sigma_l*tanh). Weights
// are the usual softmax(q.k / sqrt(d)) over all sampled keys of a query.
// Self mode is the within-frame variant: no flow branch, no mask values.
//
// Offsets are laid out as [P, heads, scales, N_k, 2] with (dy, dx) in pixels
// of the query's level; they are rescaled to each sampled scale's grid when
// added to that scale's reference point.

#include <array>
#include <utility>
#include <vector>

#include "devos/encoders.hpp"
#include "devos/nn.hpp"

namespace devos {

struct AdvaConfig {
  int embed_dim = 128;
  int heads = 8;
  int points = 4;           // N_k, per head per scale
  double sigma_base = 4.0;  // window radius at the stride-8 level, in its pixels
  bool offset_normalization = true;

  int head_dim() const { return embed_dim / heads; }
  double sigma(int level) const { return sigma_base * kLevelStrides[level] / 8.0; }
  int offset_columns() const { return heads * kNumLevels * points * 2; }
  void validate() const;
};

// Inference-time switches; disabling one removes that branch's contribution.
struct AdvaGates {
  bool flow_offsets = true;
  bool qk_flow = true;
  bool multi_scale = true;
};

template <typename T>
struct FlowInputs {
  std::array<Tensor<T>, kNumLevels> inverse;  // [2, h, w], (dy, dx), current grid -> previous frame
  std::array<Tensor<T>, kNumLevels> direct;   // [2, h, w], previous grid -> current frame
  FeaturePyramid<T> inverse_embedding;        // [C, h, w] per level; levels may be undefined
};

// What a forward pass sampled, for inspection and tests.
template <typename T>
struct AttentionTrace {
  struct Level {
    std::vector<int> scales;                  // scales sampled by this level's queries
    std::vector<std::vector<Tensor<T>>> points;  // [head][scale slot] -> [P*N_k, 2]
    std::vector<Tensor<T>> weights;           // [head] -> [P, 1, M]
    Tensor<T> semantic;                       // [P, heads, 3, N_k, 2]
    Tensor<T> flow;                           // same layout; undefined if gated off
  };
  std::array<Level, kNumLevels> levels;
};

enum class AttentionMode { Cross, Self };

template <typename T>
class DeformableAttention {
 public:
  DeformableAttention() = default;
  DeformableAttention(Initializer& init, const AdvaConfig& config, AttentionMode mode);

  // sigma_l * tanh(theta_q(Q)); Q is the projected (and motion-enriched)
  // query [P, C] of level `level`.
  Tensor<T> semantic_offsets(const Tensor<T>& queries, int level) const;

  // D * tanh(theta_f([F_inv / D, E_inv])) with D = (h, w) the level extent.
  // `flow` is [2, h, w] in level pixels; `embedding` is [C, h, w] or
  // undefined (treated as zero).
  Tensor<T> flow_offsets(const Tensor<T>& flow, const Tensor<T>& embedding) const;

  // Q + W_inv F_inv, K + W_dir F_dir; queries/keys [P, C], flows [P, 2].
  std::pair<Tensor<T>, Tensor<T>> qk_flow_enrich(const Tensor<T>& queries, const Tensor<T>& keys,
                                                 const Tensor<T>& inverse_flow, const Tensor<T>& direct_flow) const;

  FeaturePyramid<T> cross(const FeaturePyramid<T>& query, const FeaturePyramid<T>& previous,
                          const MaskEmbedding<T>& previous_mask, const FlowInputs<T>& flow, const AdvaGates& gates = {},
                          AttentionTrace<T>* trace = nullptr) const;

  FeaturePyramid<T> self(const FeaturePyramid<T>& pyramid, bool multi_scale = true,
                         AttentionTrace<T>* trace = nullptr) const;

  const AdvaConfig& config() const { return config_; }
  AttentionMode mode() const { return mode_; }

  Linear<T>& query_proj() { return q_proj_; }
  Linear<T>& key_proj() { return k_proj_; }
  Linear<T>& value_proj() { return v_proj_; }
  Linear<T>& mask_proj() { return mask_proj_; }
  Linear<T>& out_proj() { return out_proj_; }
  Linear<T>& semantic_head() { return semantic_head_; }
  Linear<T>& flow_head() { return flow_head_; }
  Linear<T>& qk_inverse() { return qk_inv_; }
  Linear<T>& qk_direct() { return qk_dir_; }
  Linear<T>& ffn_in(int level) { return ffn_in_[level]; }
  Linear<T>& ffn_out(int level) { return ffn_out_[level]; }

  void collect(const std::string& prefix, ParamList<T>& out) const;

 private:
  FeaturePyramid<T> attend(const FeaturePyramid<T>& query, const FeaturePyramid<T>& source,
                           const MaskEmbedding<T>* mask, const FlowInputs<T>* flow, const AdvaGates& gates,
                           AttentionTrace<T>* trace) const;

  AdvaConfig config_;
  AttentionMode mode_ = AttentionMode::Self;
  Linear<T> q_proj_, k_proj_, v_proj_, out_proj_;
  Linear<T> semantic_head_;
  Linear<T> mask_proj_, flow_head_, qk_inv_, qk_dir_;  // cross mode only
  std::array<Linear<T>, kNumLevels> ffn_in_, ffn_out_;
};

// Reference point of a level-`from` grid cell (i, j) on the grid of level `to`.
std::pair<double, double> reference_point(int i, int j, std::pair<int, int> from, std::pair<int, int> to);

}  // namespace devos
