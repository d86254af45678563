#include "devos/adva.hpp"

#include <cmath>
#include <numbers>

namespace devos {

void AdvaConfig::validate() const {
  if (embed_dim <= 0 || heads <= 0 || embed_dim % heads != 0) {
    throw InputError("embed_dim " + std::to_string(embed_dim) + " must be divisible by heads " +
                     std::to_string(heads));
  }
  if (points < 1) throw InputError("N_k must be >= 1");
  if (!(sigma_base > 0.0)) throw InputError("sigma_base must be positive");
}

std::pair<double, double> reference_point(int i, int j, std::pair<int, int> from, std::pair<int, int> to) {
  return {(i + 0.5) * to.first / from.first - 0.5, (j + 0.5) * to.second / from.second - 0.5};
}

namespace {

template <typename T>
Tensor<T> reference_points(std::pair<int, int> from, std::pair<int, int> to, int repeat) {
  std::vector<T> v;
  v.reserve(static_cast<std::size_t>(from.first) * from.second * repeat * 2);
  for (int i = 0; i < from.first; ++i) {
    for (int j = 0; j < from.second; ++j) {
      const auto [y, x] = reference_point(i, j, from, to);
      for (int k = 0; k < repeat; ++k) {
        v.push_back(static_cast<T>(y));
        v.push_back(static_cast<T>(x));
      }
    }
  }
  return Tensor<T>({from.first * from.second * repeat, 2}, std::move(v));
}

std::pair<int, int> spatial(const Tensor<float>& t) { return {t.dim(1), t.dim(2)}; }
std::pair<int, int> spatial(const Tensor<double>& t) { return {t.dim(1), t.dim(2)}; }

}  // namespace

template <typename T>
DeformableAttention<T>::DeformableAttention(Initializer& init, const AdvaConfig& config, AttentionMode mode)
    : config_(config), mode_(mode) {
  config_.validate();
  const int c = config_.embed_dim;
  const int cols = config_.offset_columns();
  q_proj_ = Linear<T>(init, c, c);
  k_proj_ = Linear<T>(init, c, c);
  v_proj_ = Linear<T>(init, c, c);
  out_proj_ = Linear<T>(init, c, c);

  // Semantic head starts query-independent: each head's N_k points sit on a
  // ring at half the window so they are not collapsed onto the reference.
  semantic_head_ = Linear<T>(init, c, cols);
  semantic_head_.zero();
  {
    auto b = semantic_head_.bias().mutable_data();
    const double r = std::atanh(0.5);
    const int n = config_.heads * config_.points;
    for (int h = 0; h < config_.heads; ++h) {
      for (int s = 0; s < kNumLevels; ++s) {
        for (int k = 0; k < config_.points; ++k) {
          const double a = 2.0 * std::numbers::pi * (h * config_.points + k) / n;
          const int col = ((h * kNumLevels + s) * config_.points + k) * 2;
          b[col] = static_cast<T>(r * std::sin(a));
          b[col + 1] = static_cast<T>(r * std::cos(a));
        }
      }
    }
  }

  if (mode_ == AttentionMode::Cross) {
    mask_proj_ = Linear<T>(init, c, c);
    // Flow head starts near pass-through of the normalized flow: the offset
    // D*tanh(F/D) is ~F for small displacements.
    flow_head_ = Linear<T>(init, 2 + c, cols);
    flow_head_.zero();
    auto w = flow_head_.weight().mutable_data();
    for (int col = 0; col < cols; ++col) w[static_cast<std::size_t>(col % 2) * cols + col] = T(1);
    qk_inv_ = Linear<T>(init, 2, c, false);
    qk_dir_ = Linear<T>(init, 2, c, false);
    qk_inv_.zero();
    qk_dir_.zero();
  }
  for (int l = 0; l < kNumLevels; ++l) {
    ffn_in_[l] = Linear<T>(init, c, 2 * c);
    ffn_out_[l] = Linear<T>(init, 2 * c, c);
  }
}

template <typename T>
Tensor<T> DeformableAttention<T>::semantic_offsets(const Tensor<T>& queries, int level) const {
  const int p = queries.dim(0);
  Tensor<T> raw = semantic_head_(queries);
  if (config_.offset_normalization) raw = scale(tanh(raw), static_cast<T>(config_.sigma(level)));
  return reshape(raw, {p, config_.heads, kNumLevels, config_.points, 2});
}

template <typename T>
Tensor<T> DeformableAttention<T>::flow_offsets(const Tensor<T>& flow, const Tensor<T>& embedding) const {
  if (mode_ != AttentionMode::Cross) throw UsageError("flow offsets exist only in cross attention");
  if (flow.ndim() != 3 || flow.dim(0) != 2) throw InputError("flow must be [2,H,W], got " + shape_str(flow.shape()));
  const int h = flow.dim(1), w = flow.dim(2), p = h * w;
  const int c = config_.embed_dim;
  Tensor<T> emb = embedding;
  if (!emb.defined()) {
    emb = Tensor<T>::zeros({c, h, w});
  } else if (emb.ndim() != 3 || emb.dim(0) != c || emb.dim(1) != h || emb.dim(2) != w) {
    throw InputError("flow embedding " + shape_str(emb.shape()) + " does not match flow " + shape_str(flow.shape()));
  }
  const Tensor<T> extent({2}, {static_cast<T>(h), static_cast<T>(w)});
  const Tensor<T> inv_extent({2}, {static_cast<T>(1.0 / h), static_cast<T>(1.0 / w)});
  Tensor<T> normalized = mul(to_tokens(flow), inv_extent);
  Tensor<T> raw = flow_head_(concat<T>({normalized, to_tokens(emb)}, 1));
  raw = reshape(raw, {p, config_.heads, kNumLevels, config_.points, 2});
  if (config_.offset_normalization) return mul(tanh(raw), extent);
  return mul(raw, extent);
}

template <typename T>
std::pair<Tensor<T>, Tensor<T>> DeformableAttention<T>::qk_flow_enrich(const Tensor<T>& queries, const Tensor<T>& keys,
                                                                      const Tensor<T>& inverse_flow,
                                                                      const Tensor<T>& direct_flow) const {
  if (mode_ != AttentionMode::Cross) throw UsageError("QK-flow exists only in cross attention");
  if (inverse_flow.ndim() != 2 || inverse_flow.dim(1) != 2 || inverse_flow.dim(0) != queries.dim(0)) {
    throw InputError("inverse flow " + shape_str(inverse_flow.shape()) + " does not match queries " +
                     shape_str(queries.shape()));
  }
  if (direct_flow.ndim() != 2 || direct_flow.dim(1) != 2 || direct_flow.dim(0) != keys.dim(0)) {
    throw InputError("direct flow " + shape_str(direct_flow.shape()) + " does not match keys " +
                     shape_str(keys.shape()));
  }
  return {add(queries, qk_inv_(inverse_flow)), add(keys, qk_dir_(direct_flow))};
}

template <typename T>
FeaturePyramid<T> DeformableAttention<T>::cross(const FeaturePyramid<T>& query, const FeaturePyramid<T>& previous,
                                                const MaskEmbedding<T>& previous_mask, const FlowInputs<T>& flow,
                                                const AdvaGates& gates, AttentionTrace<T>* trace) const {
  if (mode_ != AttentionMode::Cross) throw UsageError("cross() called on a self-attention block");
  for (int l = 0; l < kNumLevels; ++l) {
    if (!previous.levels[l].defined() || !previous_mask.levels[l].defined()) {
      throw UsageError("cross attention needs the previous frame; the first frame uses memory only");
    }
  }
  return attend(query, previous, &previous_mask, &flow, gates, trace);
}

template <typename T>
FeaturePyramid<T> DeformableAttention<T>::self(const FeaturePyramid<T>& pyramid, bool multi_scale,
                                               AttentionTrace<T>* trace) const {
  AdvaGates gates;
  gates.flow_offsets = false;
  gates.qk_flow = false;
  gates.multi_scale = multi_scale;
  return attend(pyramid, pyramid, nullptr, nullptr, gates, trace);
}

template <typename T>
FeaturePyramid<T> DeformableAttention<T>::attend(const FeaturePyramid<T>& query, const FeaturePyramid<T>& source,
                                                 const MaskEmbedding<T>* mask, const FlowInputs<T>* flow,
                                                 const AdvaGates& gates, AttentionTrace<T>* trace) const {
  const int c = config_.embed_dim;
  const int heads = config_.heads;
  const int d = config_.head_dim();
  const int nk = config_.points;
  const bool cross = mode_ == AttentionMode::Cross;
  const bool use_qk = cross && gates.qk_flow;
  const bool use_flow = cross && gates.flow_offsets;

  for (int l = 0; l < kNumLevels; ++l) {
    for (const Tensor<T>* t : {&query.levels[l], &source.levels[l]}) {
      if (!t->defined() || t->ndim() != 3 || t->dim(0) != c) {
        throw DimensionError("attention level " + std::to_string(l) + " must be [" + std::to_string(c) + ",H,W]");
      }
    }
    if (cross && spatial(mask->levels[l]) != spatial(source.levels[l])) {
      throw DimensionError("mask embedding level " + std::to_string(l) + " does not match previous features");
    }
    if (cross && (use_qk || use_flow)) {
      if (!flow->inverse[l].defined() || spatial(flow->inverse[l]) != spatial(query.levels[l])) {
        throw InputError("inverse flow at level " + std::to_string(l) + " does not match the query grid");
      }
      if (use_qk && (!flow->direct[l].defined() || spatial(flow->direct[l]) != spatial(source.levels[l]))) {
        throw InputError("direct flow at level " + std::to_string(l) + " does not match the previous grid");
      }
    }
  }

  // Key and value maps of every source scale, split per head.
  std::array<std::vector<Tensor<T>>, kNumLevels> key_heads, value_heads;
  std::array<std::pair<int, int>, kNumLevels> src_size;
  for (int s = 0; s < kNumLevels; ++s) {
    const Tensor<T>& src = source.levels[s];
    src_size[s] = spatial(src);
    Tensor<T> tokens = to_tokens(src);
    Tensor<T> keys = k_proj_(tokens);
    if (use_qk) keys = add(keys, qk_dir_(to_tokens(flow->direct[s])));
    Tensor<T> values_in = cross ? add(tokens, mask_proj_(to_tokens(mask->levels[s]))) : tokens;
    Tensor<T> key_map = from_tokens(keys, src_size[s].first, src_size[s].second);
    Tensor<T> value_map = from_tokens(v_proj_(values_in), src_size[s].first, src_size[s].second);
    for (int h = 0; h < heads; ++h) {
      key_heads[s].push_back(slice(key_map, 0, h * d, (h + 1) * d));
      value_heads[s].push_back(slice(value_map, 0, h * d, (h + 1) * d));
    }
  }

  FeaturePyramid<T> out;
  const T inv_sqrt_d = static_cast<T>(1.0 / std::sqrt(static_cast<double>(d)));
  for (int l = 0; l < kNumLevels; ++l) {
    const auto qsize = spatial(query.levels[l]);
    const int p = qsize.first * qsize.second;
    Tensor<T> q_tokens = to_tokens(query.levels[l]);
    Tensor<T> q = q_proj_(q_tokens);
    if (use_qk) q = add(q, qk_inv_(to_tokens(flow->inverse[l])));

    Tensor<T> semantic = semantic_offsets(q, l);
    Tensor<T> total = semantic;
    Tensor<T> flow_off;
    if (use_flow) {
      flow_off = flow_offsets(flow->inverse[l], flow->inverse_embedding.levels[l]);
      total = add(total, flow_off);
    }
    total = reshape(total, {p, config_.offset_columns()});

    std::vector<int> scales;
    if (gates.multi_scale) {
      scales = {0, 1, 2};
    } else {
      scales = {l};
    }
    if (trace) {
      auto& lv = trace->levels[l];
      lv.scales = scales;
      lv.points.assign(heads, {});
      lv.weights.clear();
      lv.semantic = semantic;
      lv.flow = flow_off;
    }

    std::vector<Tensor<T>> head_out;
    for (int h = 0; h < heads; ++h) {
      std::vector<Tensor<T>> ks, vs;
      for (int s : scales) {
        const int col = (h * kNumLevels + s) * nk * 2;
        Tensor<T> off = reshape(slice(total, 1, col, col + nk * 2), {p * nk, 2});
        const Tensor<T> ratio({2}, {static_cast<T>(static_cast<double>(src_size[s].first) / qsize.first),
                                    static_cast<T>(static_cast<double>(src_size[s].second) / qsize.second)});
        Tensor<T> pts = add(mul(off, ratio), reference_points<T>(qsize, src_size[s], nk));
        ks.push_back(reshape(bilinear_sample(key_heads[s][h], pts), {p, nk, d}));
        vs.push_back(reshape(bilinear_sample(value_heads[s][h], pts), {p, nk, d}));
        if (trace) trace->levels[l].points[h].push_back(pts);
      }
      Tensor<T> kmat = ks.size() == 1 ? ks[0] : concat(ks, 1);
      Tensor<T> vmat = vs.size() == 1 ? vs[0] : concat(vs, 1);
      Tensor<T> qh = reshape(slice(q, 1, h * d, (h + 1) * d), {p, 1, d});
      Tensor<T> weights = softmax(scale(matmul(qh, transpose(kmat)), inv_sqrt_d), -1);
      if (trace) trace->levels[l].weights.push_back(weights);
      head_out.push_back(reshape(matmul(weights, vmat), {p, d}));
    }
    Tensor<T> attended = heads == 1 ? head_out[0] : concat(head_out, 1);
    Tensor<T> x = add(q_tokens, out_proj_(attended));
    x = add(x, ffn_out_[l](relu(ffn_in_[l](x))));
    out.levels[l] = from_tokens(x, qsize.first, qsize.second);
  }
  return out;
}

template <typename T>
void DeformableAttention<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  q_proj_.collect(prefix + ".q", out);
  k_proj_.collect(prefix + ".k", out);
  v_proj_.collect(prefix + ".v", out);
  out_proj_.collect(prefix + ".out", out);
  semantic_head_.collect(prefix + ".semantic", out);
  if (mode_ == AttentionMode::Cross) {
    mask_proj_.collect(prefix + ".mask", out);
    flow_head_.collect(prefix + ".flow", out);
    qk_inv_.collect(prefix + ".qk_inv", out);
    qk_dir_.collect(prefix + ".qk_dir", out);
  }
  for (int l = 0; l < kNumLevels; ++l) {
    ffn_in_[l].collect(prefix + ".ffn" + std::to_string(l) + ".in", out);
    ffn_out_[l].collect(prefix + ".ffn" + std::to_string(l) + ".out", out);
  }
}

template class DeformableAttention<float>;
template class DeformableAttention<double>;

}  // namespace devos
