#pragma once

// The full segmentation model, sequential propagation over a video, desk-scale
// training, checkpoints, the scaling benchmark and the whole-model gradient
// check.
//
// Per frame t >= 1:
//   encode -> deformable self-attention -> ADVA against frame t-1 (features
//   after self-attention, mask embedding of the t-1 prediction, flows of the
//   pair t-1 -> t) -> long-term readout -> fusion -> decoder -> argmax.
// Frame 0 seeds the memory bank with its ground-truth mask.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "devos/adva.hpp"
#include "devos/dataio.hpp"
#include "devos/decoder.hpp"
#include "devos/encoders.hpp"
#include "devos/flow.hpp"
#include "devos/memory.hpp"

namespace devos {

struct ModelConfig {
  std::string preset = "base";
  int embed_dim = 128;
  int heads = 8;
  int points = 4;
  double sigma_base = 4.0;
  bool offset_normalization = true;
  int stem = 16;
  std::array<int, 4> widths{32, 64, 128, 256};
  // Nominal padded frame size for the positional tables.
  int grid_height = 480;
  int grid_width = 864;
  bool scale_embedding = true;
  std::uint64_t init_seed = 0;

  // "base", "toy" (C=32, 64x128 frames) or "micro" (C=8, heads 2, N_k 2,
  // 16x16 frames padded to 32x32). Throws InputError for other names.
  static ModelConfig preset_named(const std::string& name);
  AdvaConfig adva() const;
  void validate() const;
  nlohmann::json to_json() const;
  static ModelConfig from_json(const nlohmann::json& j);
};

// Inference-time ablation switches.
struct Gates {
  bool flow_offsets = true;
  bool qk_flow = true;
  bool long_term = true;
  bool multi_scale = true;

  AdvaGates adva() const { return {flow_offsets, qk_flow, multi_scale}; }
  // Parses a comma list of flow-offsets, qk-flow, long-term, multi-scale.
  static Gates disabling(const std::string& list);
};

// Frames are padded at the bottom/right to the next multiple of 32.
inline int padded_extent(int n) { return std::max(32, (n + 31) / 32 * 32); }
ObjectMask pad_mask(const ObjectMask& mask, int height, int width);

template <typename T>
struct FrameState {
  FeaturePyramid<T> features;  // after self-attention
  MaskEmbedding<T> mask;
};

template <typename T>
struct EncodedFrame {
  FeaturePyramid<T> features;  // after self-attention
  std::array<Tensor<T>, kNumLevels> skip;
};

template <typename T>
class Model {
 public:
  explicit Model(const ModelConfig& config);

  const ModelConfig& config() const { return config_; }
  // Every learnable tensor, in a fixed order with unique dotted names.
  ParamList<T> parameters() const;

  // `rgb` is [3, H, W] with H, W multiples of 32.
  EncodedFrame<T> encode(const Tensor<T>& rgb) const;
  MaskEmbedding<T> embed_mask(const ObjectMask& padded) const;
  // Padded [16, H, W] logits for the current frame.
  Tensor<T> segment(const EncodedFrame<T>& current, const FrameState<T>& previous, const FlowField& direct,
                    const FlowField& inverse, const MemoryBank<T>& bank, const Gates& gates = {}) const;

  ImageEncoder<T>& image_encoder() { return image_encoder_; }
  MaskEncoder<T>& mask_encoder() { return mask_encoder_; }
  FlowEmbedder<T>& flow_embedder() { return flow_embedder_; }
  DeformableAttention<T>& self_attention() { return self_attention_; }
  DeformableAttention<T>& adva() { return adva_; }
  LongTermReadout<T>& readout() { return readout_; }
  Fusion<T>& fusion() { return fusion_; }
  Decoder<T>& decoder() { return decoder_; }

 private:
  ModelConfig config_;
  ImageEncoder<T> image_encoder_;
  MaskEncoder<T> mask_encoder_;
  FlowEmbedder<T> flow_embedder_;
  DeformableAttention<T> self_attention_;
  DeformableAttention<T> adva_;
  LongTermReadout<T> readout_;
  Fusion<T> fusion_;
  Decoder<T> decoder_;
};

struct PropagateOptions {
  MemoryPolicy memory;
  Gates gates;
};

struct PropagationTrace {
  // Entry i describes frame i + 1.
  std::vector<ObjectMask> masks;
  std::vector<double> seconds;
  std::vector<int> bank_sizes;  // entries read by that frame's long-term readout
};

// Needs a frame-0 annotation and per-pair flows (sequence.has_flows()).
template <typename T>
PropagationTrace propagate(const Model<T>& model, const Sequence& sequence, const PropagateOptions& options = {});

// Masks for every frame: the frame-0 annotation followed by the trace.
std::vector<ObjectMask> full_prediction(const Sequence& sequence, const PropagationTrace& trace);

// ---------------------------------------------------------------------------
// Training

struct TrainOptions {
  long steps = 500;
  double lr = 1e-3;
  std::uint64_t seed = 0;
  int clip_length = 3;
  bool shuffle_channels = true;
  // Called after every step with (step, loss).
  std::function<void(long, double)> on_step;
};

struct TrainState {
  std::vector<double> losses;
  long steps = 0;
  std::vector<std::vector<double>> adam_m, adam_v;
};

// Loss of one clip: frame 0 seeds the bank and the short-term state; every
// later frame is predicted against the ground truth of its predecessor and
// scored with per-pixel cross-entropy. Labels are remapped by `perm`.
template <typename T>
Tensor<T> clip_loss(const Model<T>& model, const Sequence& sequence, int start, int length,
                    const LabelPermutation& perm);

// Adam on per-pixel cross-entropy over random clips. Deterministic in the
// seed. A non-finite loss throws TrainingError carrying the step index.
TrainState train_toy(Model<float>& model, const std::vector<Sequence>& sequences, const TrainOptions& options,
                     const TrainState* resume = nullptr);

// ---------------------------------------------------------------------------
// Checkpoints
//
//   "DEVOSCKP"                 8 bytes
//   version                    u32 (1)
//   config length, config      u32, UTF-8 JSON of ModelConfig
//   parameter count            u32
//   per parameter:             u32 name length, name, u32 ndim, ndim x u32 dims,
//                              float32 values, row-major
//   optimizer flag             u8 (0 or 1)
//   if 1: u64 steps, then per parameter float64 first moments followed by
//         float64 second moments
// All integers and floats little-endian.

inline constexpr char kCheckpointMagic[9] = "DEVOSCKP";
inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const std::filesystem::path& path, const Model<float>& model, const TrainState* state = nullptr);

struct Checkpoint {
  Model<float> model;
  std::optional<TrainState> state;
};
// Throws InputError if missing, FormatError if malformed.
Checkpoint load_checkpoint(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Benchmark

struct BenchRow {
  std::string method;  // "adva" or "dense"
  int size = 0;        // square frame side, input pixels
  long tokens = 0;     // query tokens over all levels
  double median_ms = 0;
  double stdev_ms = 0;
};

struct BenchReport {
  std::vector<BenchRow> rows;
  double adva_exponent = 0;   // slope of log time vs log pixel count
  double dense_exponent = 0;
  nlohmann::json to_json() const;
  std::string to_table() const;
};

// Times the cross-frame attention step on S x S frames for ADVA and for a
// dense global attention over the same pyramid tokens.
BenchReport bench(const ModelConfig& config, const std::vector<int>& sizes, int repeats, std::uint64_t seed);

// Least-squares slope of log(y) against log(x).
double loglog_slope(const std::vector<double>& x, const std::vector<double>& y);

// ---------------------------------------------------------------------------
// Whole-model gradient check

struct GradGroup {
  std::string name;
  double max_rel_error = 0;
  long checked = 0;
  bool pass = false;
};

struct GradCheckReport {
  std::vector<GradGroup> groups;
  double tolerance = 1e-2;
  bool pass() const;
  nlohmann::json to_json() const;
};

// Double-precision finite differences of a 3-frame clip loss with respect to
// every parameter tensor. `analytic_scale` != 1 simulates a broken backward.
GradCheckReport gradcheck_model(const ModelConfig& config, std::uint64_t seed, long entries_per_group = 4,
                                double tolerance = 1e-2, double analytic_scale = 1.0);

// A synthetic clip sized for `config` (used by gradcheck and tests).
Sequence micro_clip(const ModelConfig& config, int frames, std::uint64_t seed);

}  // namespace devos
