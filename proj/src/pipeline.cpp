#include "devos/pipeline.hpp"

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <random>
#include <sstream>

#include "devos/gradcheck.hpp"

namespace devos {

ModelConfig ModelConfig::preset_named(const std::string& name) {
  ModelConfig c;
  c.preset = name;
  if (name == "base") return c;
  if (name == "toy") {
    c.embed_dim = 32;
    c.heads = 4;
    c.points = 4;
    c.stem = 8;
    c.widths = {16, 32, 32, 64};
    c.grid_height = 64;
    c.grid_width = 128;
    return c;
  }
  if (name == "micro") {
    c.embed_dim = 8;
    c.heads = 2;
    c.points = 2;
    c.stem = 4;
    c.widths = {4, 8, 8, 8};
    c.grid_height = 32;
    c.grid_width = 32;
    return c;
  }
  throw InputError("unknown model preset '" + name + "' (base, toy, micro)");
}

AdvaConfig ModelConfig::adva() const {
  AdvaConfig a;
  a.embed_dim = embed_dim;
  a.heads = heads;
  a.points = points;
  a.sigma_base = sigma_base;
  a.offset_normalization = offset_normalization;
  return a;
}

void ModelConfig::validate() const {
  adva().validate();
  if (embed_dim % kDecoderGroups != 0) throw InputError("embed_dim must be divisible by 8");
  if (stem < 1 || std::any_of(widths.begin(), widths.end(), [](int w) { return w < 1; })) {
    throw InputError("backbone widths must be positive");
  }
  require_encodable(grid_height, grid_width);
}

nlohmann::json ModelConfig::to_json() const {
  return {{"preset", preset},
          {"embed_dim", embed_dim},
          {"heads", heads},
          {"points", points},
          {"sigma_base", sigma_base},
          {"offset_normalization", offset_normalization},
          {"stem", stem},
          {"widths", widths},
          {"grid_height", grid_height},
          {"grid_width", grid_width},
          {"scale_embedding", scale_embedding},
          {"init_seed", init_seed}};
}

ModelConfig ModelConfig::from_json(const nlohmann::json& j) {
  try {
    ModelConfig c = preset_named(j.value("preset", std::string("base")));
    c.embed_dim = j.value("embed_dim", c.embed_dim);
    c.heads = j.value("heads", c.heads);
    c.points = j.value("points", c.points);
    c.sigma_base = j.value("sigma_base", c.sigma_base);
    c.offset_normalization = j.value("offset_normalization", c.offset_normalization);
    c.stem = j.value("stem", c.stem);
    if (j.contains("widths")) c.widths = j.at("widths").get<std::array<int, 4>>();
    c.grid_height = j.value("grid_height", c.grid_height);
    c.grid_width = j.value("grid_width", c.grid_width);
    c.scale_embedding = j.value("scale_embedding", c.scale_embedding);
    c.init_seed = j.value("init_seed", c.init_seed);
    c.validate();
    return c;
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("model config: ") + e.what());
  }
}

Gates Gates::disabling(const std::string& list) {
  Gates g;
  std::stringstream ss(list);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (item.empty()) continue;
    if (item == "flow-offsets") {
      g.flow_offsets = false;
    } else if (item == "qk-flow") {
      g.qk_flow = false;
    } else if (item == "long-term") {
      g.long_term = false;
    } else if (item == "multi-scale") {
      g.multi_scale = false;
    } else {
      throw InputError("unknown branch '" + item + "' (flow-offsets, qk-flow, long-term, multi-scale)");
    }
  }
  return g;
}

ObjectMask pad_mask(const ObjectMask& mask, int height, int width) {
  if (height < mask.height() || width < mask.width()) throw DimensionError("pad_mask: target smaller than mask");
  std::vector<std::uint8_t> out(static_cast<std::size_t>(height) * width, 0);
  for (int y = 0; y < mask.height(); ++y) {
    std::copy_n(mask.labels().begin() + static_cast<long>(y) * mask.width(), mask.width(),
                out.begin() + static_cast<long>(y) * width);
  }
  return ObjectMask(height, width, std::move(out));
}

// ---------------------------------------------------------------------------

template <typename T>
Model<T>::Model(const ModelConfig& config) : config_(config) {
  config_.validate();
  Initializer init(config_.init_seed);
  ConvStackConfig backbone{3, config_.stem, config_.widths};
  ConvStackConfig mask_stack{kMaxObjects, config_.stem, config_.widths};
  image_encoder_ = ImageEncoder<T>(init, backbone, config_.embed_dim, config_.grid_height, config_.grid_width,
                                   config_.scale_embedding);
  mask_encoder_ = MaskEncoder<T>(init, mask_stack, config_.embed_dim);
  flow_embedder_ = FlowEmbedder<T>(init, config_.embed_dim);
  self_attention_ = DeformableAttention<T>(init, config_.adva(), AttentionMode::Self);
  adva_ = DeformableAttention<T>(init, config_.adva(), AttentionMode::Cross);
  readout_ = LongTermReadout<T>(init, config_.embed_dim, config_.heads);
  fusion_ = Fusion<T>(init, config_.embed_dim);
  decoder_ = Decoder<T>(init, config_.embed_dim, image_encoder_.skip_channels());
}

template <typename T>
ParamList<T> Model<T>::parameters() const {
  ParamList<T> out;
  image_encoder_.collect("image_encoder", out);
  mask_encoder_.collect("mask_encoder", out);
  flow_embedder_.collect("flow_embedder", out);
  self_attention_.collect("self_attention", out);
  adva_.collect("adva", out);
  readout_.collect("readout", out);
  fusion_.collect("fusion", out);
  decoder_.collect("decoder", out);
  return out;
}

template <typename T>
EncodedFrame<T> Model<T>::encode(const Tensor<T>& rgb) const {
  EncodedImage<T> enc = image_encoder_(rgb);
  return {self_attention_.self(enc.features), std::move(enc.skip)};
}

template <typename T>
MaskEmbedding<T> Model<T>::embed_mask(const ObjectMask& padded) const {
  return mask_encoder_(padded);
}

template <typename T>
Tensor<T> Model<T>::segment(const EncodedFrame<T>& current, const FrameState<T>& previous, const FlowField& direct,
                            const FlowField& inverse, const MemoryBank<T>& bank, const Gates& gates) const {
  const int hp = current.skip[0].dim(1) * kLevelStrides[0];
  const int wp = current.skip[0].dim(2) * kLevelStrides[0];
  FlowInputs<T> flow;
  if (gates.flow_offsets || gates.qk_flow) {
    flow.inverse = flow_levels<T>(inverse, hp, wp);
    flow.direct = flow_levels<T>(direct, hp, wp);
    if (gates.flow_offsets) flow.inverse_embedding = flow_embedder_(flow.inverse);
  }
  const FeaturePyramid<T> short_term =
      adva_.cross(current.features, previous.features, previous.mask, flow, gates.adva());
  FeaturePyramid<T> long_term;
  if (gates.long_term && !bank.empty()) {
    long_term = readout_(current.features, bank);
  } else {
    long_term.levels[0] = current.features.levels[0];
    for (int l : kMemoryLevels) long_term.levels[l] = Tensor<T>::zeros(current.features.levels[l].shape());
  }
  return decoder_(fusion_(current.features, short_term, long_term), current.skip);
}

template class Model<float>;
template class Model<double>;

// ---------------------------------------------------------------------------

namespace {

template <typename T>
Tensor<T> padded_frame(const Image& frame) {
  return pad_to(image_tensor<T>(frame), padded_extent(frame.height), padded_extent(frame.width));
}

void require_propagatable(const Sequence& seq) {
  if (seq.frames.empty()) throw InputError("sequence " + seq.name + " has no frames");
  if (seq.annotations.empty() || !seq.annotations.front()) {
    throw InputError("sequence " + seq.name + " has no first-frame annotation");
  }
  if (seq.length() > 1 && !seq.has_flows()) throw InputError("sequence " + seq.name + " has no optical flow");
}

}  // namespace

template <typename T>
PropagationTrace propagate(const Model<T>& model, const Sequence& sequence, const PropagateOptions& options) {
  require_propagatable(sequence);
  options.memory.validate();
  PropagationTrace trace;
  if (sequence.length() < 2) return trace;

  NoGradGuard no_grad;
  const int h = sequence.height(), w = sequence.width();
  const int hp = padded_extent(h), wp = padded_extent(w);
  MemoryBank<T> bank(options.memory);

  const EncodedFrame<T> first = model.encode(padded_frame<T>(sequence.frames[0]));
  FrameState<T> previous{first.features, model.embed_mask(pad_mask(*sequence.annotations[0], hp, wp))};
  bank.maybe_memorize(make_entry(0, previous.features, previous.mask));

  for (int t = 1; t < sequence.length(); ++t) {
    const auto start = std::chrono::steady_clock::now();
    const EncodedFrame<T> current = model.encode(padded_frame<T>(sequence.frames[t]));
    trace.bank_sizes.push_back(bank.size());
    const Tensor<T> logits = model.segment(current, previous, sequence.flow_direct[t], sequence.flow_inverse[t],
                                           bank, options.gates);
    ObjectMask mask = logits_to_mask(crop_to(logits, h, w));
    MaskEmbedding<T> embedding = model.embed_mask(pad_mask(mask, hp, wp));
    bank.maybe_memorize(make_entry(t, current.features, embedding));
    previous = {current.features, std::move(embedding)};
    trace.masks.push_back(std::move(mask));
    trace.seconds.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
  }
  return trace;
}

template PropagationTrace propagate<float>(const Model<float>&, const Sequence&, const PropagateOptions&);
template PropagationTrace propagate<double>(const Model<double>&, const Sequence&, const PropagateOptions&);

std::vector<ObjectMask> full_prediction(const Sequence& sequence, const PropagationTrace& trace) {
  std::vector<ObjectMask> out{*sequence.annotations.at(0)};
  out.insert(out.end(), trace.masks.begin(), trace.masks.end());
  return out;
}

// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> clip_loss(const Model<T>& model, const Sequence& sequence, int start, int length,
                    const LabelPermutation& perm) {
  if (length < 2 || start < 0 || start + length > sequence.length()) {
    throw InputError("clip [" + std::to_string(start) + ", " + std::to_string(start + length) + ") outside " +
                     sequence.name);
  }
  if (!sequence.has_flows()) throw InputError("training sequence " + sequence.name + " has no flow");
  const int h = sequence.height(), w = sequence.width();
  const int hp = padded_extent(h), wp = padded_extent(w);
  auto truth = [&](int t) {
    if (!sequence.annotations[t]) throw InputError("training needs every annotation; " + sequence.name + " lacks one");
    return apply_permutation(*sequence.annotations[t], perm);
  };

  MemoryBank<T> bank;
  const EncodedFrame<T> first = model.encode(padded_frame<T>(sequence.frames[start]));
  FrameState<T> previous{first.features, model.embed_mask(pad_mask(truth(start), hp, wp))};
  bank.maybe_memorize(make_entry(0, previous.features, previous.mask));

  std::vector<Tensor<T>> losses;
  for (int i = 1; i < length; ++i) {
    const int t = start + i;
    const EncodedFrame<T> current = model.encode(padded_frame<T>(sequence.frames[t]));
    const Tensor<T> logits =
        model.segment(current, previous, sequence.flow_direct[t], sequence.flow_inverse[t], bank);
    const ObjectMask gt = truth(t);
    const std::vector<int> labels(gt.labels().begin(), gt.labels().end());
    losses.push_back(cross_entropy(crop_to(logits, h, w), std::span<const int>(labels)));
    previous = {current.features, model.embed_mask(pad_mask(gt, hp, wp))};
  }
  Tensor<T> total = losses[0];
  for (std::size_t i = 1; i < losses.size(); ++i) total = add(total, losses[i]);
  return scale(total, static_cast<T>(1.0 / static_cast<double>(losses.size())));
}

template Tensor<float> clip_loss<float>(const Model<float>&, const Sequence&, int, int, const LabelPermutation&);
template Tensor<double> clip_loss<double>(const Model<double>&, const Sequence&, int, int, const LabelPermutation&);

TrainState train_toy(Model<float>& model, const std::vector<Sequence>& sequences, const TrainOptions& options,
                     const TrainState* resume) {
  if (options.steps < 0) throw InputError("steps must be >= 0");
  if (options.clip_length < 2) throw InputError("clip length must be >= 2");
  if (sequences.empty() && options.steps > 0) throw InputError("no training sequences");
  for (const auto& s : sequences) {
    if (s.length() < options.clip_length) {
      throw InputError("sequence " + s.name + " is shorter than the clip length");
    }
  }

  const ParamList<float> params = model.parameters();
  Adam<float> adam(params, AdamOptions{options.lr, 0.9, 0.999, 1e-8});
  TrainState state;
  if (resume) {
    adam.restore(resume->steps, resume->adam_m, resume->adam_v);
    state.losses = resume->losses;
  }
  std::mt19937_64 rng(options.seed);
  for (long step = 0; step < options.steps; ++step) {
    const auto& seq = sequences[std::uniform_int_distribution<std::size_t>(0, sequences.size() - 1)(rng)];
    const int start = std::uniform_int_distribution<int>(0, seq.length() - options.clip_length)(rng);
    const std::uint64_t perm_seed = rng();
    const LabelPermutation perm = options.shuffle_channels && seq.annotations[start]
                                      ? shuffle_channels(*seq.annotations[start], perm_seed).second
                                      : identity_permutation();
    zero_grads(params);
    Tensor<float> loss;
    try {
      loss = clip_loss(model, seq, start, options.clip_length, perm);
    } catch (const NumericError& e) {
      throw TrainingError(std::string("non-finite value: ") + e.what(), step);
    }
    const double value = loss.item();
    if (!std::isfinite(value)) throw TrainingError("loss is not finite", step);
    backward(loss);
    adam.step();
    state.losses.push_back(value);
    if (options.on_step) options.on_step(step, value);
  }
  state.steps = adam.steps();
  state.adam_m = adam.first_moments();
  state.adam_v = adam.second_moments();
  return state;
}

// ---------------------------------------------------------------------------

namespace {

void put_u32(std::ostream& out, std::uint32_t v) {
  const char b[4] = {static_cast<char>(v), static_cast<char>(v >> 8), static_cast<char>(v >> 16),
                     static_cast<char>(v >> 24)};
  out.write(b, 4);
}

void put_u64(std::ostream& out, std::uint64_t v) {
  put_u32(out, static_cast<std::uint32_t>(v));
  put_u32(out, static_cast<std::uint32_t>(v >> 32));
}

class Reader {
 public:
  Reader(std::istream& in, std::string path) : in_(in), path_(std::move(path)) {}

  void bytes(char* dst, std::size_t n) {
    in_.read(dst, static_cast<std::streamsize>(n));
    if (static_cast<std::size_t>(in_.gcount()) != n) throw FormatError(path_ + ": truncated checkpoint");
  }
  std::uint32_t u32() {
    unsigned char b[4];
    bytes(reinterpret_cast<char*>(b), 4);
    return b[0] | (b[1] << 8) | (b[2] << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
  }
  std::uint64_t u64() {
    const std::uint64_t lo = u32();
    return lo | (static_cast<std::uint64_t>(u32()) << 32);
  }
  std::string string(std::uint32_t n) {
    std::string s(n, '\0');
    bytes(s.data(), n);
    return s;
  }
  const std::string& path() const { return path_; }

 private:
  std::istream& in_;
  std::string path_;
};

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Model<float>& model, const TrainState* state) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write checkpoint " + path.string());
  out.write(kCheckpointMagic, 8);
  put_u32(out, kCheckpointVersion);
  const std::string config = model.config().to_json().dump();
  put_u32(out, static_cast<std::uint32_t>(config.size()));
  out.write(config.data(), static_cast<std::streamsize>(config.size()));
  const ParamList<float> params = model.parameters();
  put_u32(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    put_u32(out, static_cast<std::uint32_t>(p.name.size()));
    out.write(p.name.data(), static_cast<std::streamsize>(p.name.size()));
    put_u32(out, static_cast<std::uint32_t>(p.value.ndim()));
    for (int d : p.value.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    for (float v : p.value.data()) put_u32(out, std::bit_cast<std::uint32_t>(v));
  }
  const bool with_state = state && state->adam_m.size() == params.size();
  out.put(with_state ? 1 : 0);
  if (with_state) {
    put_u64(out, static_cast<std::uint64_t>(state->steps));
    for (std::size_t i = 0; i < params.size(); ++i) {
      for (double v : state->adam_m[i]) put_u64(out, std::bit_cast<std::uint64_t>(v));
      for (double v : state->adam_v[i]) put_u64(out, std::bit_cast<std::uint64_t>(v));
    }
  }
  if (!out) throw InputError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw InputError("missing checkpoint " + path.string());
  std::ifstream in(path, std::ios::binary);
  Reader r(in, path.string());
  if (r.string(8) != std::string(kCheckpointMagic, 8)) throw FormatError(path.string() + ": not a checkpoint");
  if (const auto v = r.u32(); v != kCheckpointVersion) {
    throw FormatError(path.string() + ": unsupported checkpoint version " + std::to_string(v));
  }
  nlohmann::json config;
  try {
    config = nlohmann::json::parse(r.string(r.u32()));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": bad config block: " + e.what());
  }
  Checkpoint ck{Model<float>(ModelConfig::from_json(config)), std::nullopt};
  ParamList<float> params = ck.model.parameters();
  if (r.u32() != params.size()) throw FormatError(path.string() + ": parameter count does not match config");
  for (auto& p : params) {
    const std::string name = r.string(r.u32());
    if (name != p.name) throw FormatError(path.string() + ": expected parameter " + p.name + ", found " + name);
    Shape shape(r.u32());
    for (auto& d : shape) d = static_cast<int>(r.u32());
    if (shape != p.value.shape()) throw FormatError(path.string() + ": shape mismatch for " + name);
    for (auto& v : p.value.mutable_data()) v = std::bit_cast<float>(r.u32());
  }
  char flag = 0;
  r.bytes(&flag, 1);
  if (flag == 1) {
    TrainState state;
    state.steps = static_cast<long>(r.u64());
    for (const auto& p : params) {
      std::vector<double> m(static_cast<std::size_t>(p.value.size())), v(m.size());
      for (auto& x : m) x = std::bit_cast<double>(r.u64());
      for (auto& x : v) x = std::bit_cast<double>(r.u64());
      state.adam_m.push_back(std::move(m));
      state.adam_v.push_back(std::move(v));
    }
    ck.state = std::move(state);
  } else if (flag != 0) {
    throw FormatError(path.string() + ": bad optimizer flag");
  }
  return ck;
}

// ---------------------------------------------------------------------------

double loglog_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw InputError("loglog_slope needs two or more points");
  std::vector<double> lx, ly;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (!(x[i] > 0 && y[i] > 0)) throw InputError("loglog_slope needs positive values");
    lx.push_back(std::log(x[i]));
    ly.push_back(std::log(y[i]));
  }
  const double mx = std::accumulate(lx.begin(), lx.end(), 0.0) / lx.size();
  const double my = std::accumulate(ly.begin(), ly.end(), 0.0) / ly.size();
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < lx.size(); ++i) {
    sxy += (lx[i] - mx) * (ly[i] - my);
    sxx += (lx[i] - mx) * (lx[i] - mx);
  }
  return sxy / sxx;
}

namespace {

FeaturePyramid<float> random_pyramid(int c, int size, std::mt19937_64& rng) {
  std::normal_distribution<float> n(0.0f, 1.0f);
  FeaturePyramid<float> p;
  for (int l = 0; l < kNumLevels; ++l) {
    const auto [h, w] = level_size(size, size, l);
    std::vector<float> v(static_cast<std::size_t>(c) * h * w);
    for (auto& x : v) x = n(rng);
    p.levels[l] = Tensor<float>({c, h, w}, std::move(v));
  }
  return p;
}

// Global multi-head attention from every query token to every source token,
// with ADVA's own projections.
Tensor<float> dense_attention(DeformableAttention<float>& attn, const FeaturePyramid<float>& query,
                              const FeaturePyramid<float>& source) {
  auto stack = [](const FeaturePyramid<float>& p) {
    std::vector<Tensor<float>> parts;
    for (const auto& l : p.levels) parts.push_back(to_tokens(l));
    return concat(parts, 0);
  };
  const Tensor<float> q = attn.query_proj()(stack(query));
  const Tensor<float> src = stack(source);
  const Tensor<float> k = attn.key_proj()(src);
  const Tensor<float> v = attn.value_proj()(src);
  const int heads = attn.config().heads, d = attn.config().head_dim();
  const float inv = 1.0f / std::sqrt(static_cast<float>(d));
  std::vector<Tensor<float>> outs;
  for (int h = 0; h < heads; ++h) {
    const Tensor<float> qh = slice(q, 1, h * d, (h + 1) * d);
    const Tensor<float> kh = slice(k, 1, h * d, (h + 1) * d);
    const Tensor<float> vh = slice(v, 1, h * d, (h + 1) * d);
    outs.push_back(matmul(softmax(scale(matmul(qh, transpose(kh)), inv), 1), vh));
  }
  return attn.out_proj()(concat(outs, 1));
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double stdev(const std::vector<double>& v) {
  const double m = std::accumulate(v.begin(), v.end(), 0.0) / v.size();
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return v.size() > 1 ? std::sqrt(s / (v.size() - 1)) : 0.0;
}

}  // namespace

BenchReport bench(const ModelConfig& config, const std::vector<int>& sizes, int repeats, std::uint64_t seed) {
  if (sizes.size() < 2) throw InputError("bench needs at least two sizes");
  if (repeats < 1) throw InputError("bench repeats must be >= 1");
  for (int s : sizes) require_encodable(s, s);
  NoGradGuard no_grad;
  Initializer init(seed);
  DeformableAttention<float> attn(init, config.adva(), AttentionMode::Cross);
  std::mt19937_64 rng(seed);

  BenchReport report;
  std::vector<double> pixels, adva_ms, dense_ms;
  for (int size : sizes) {
    const int c = config.embed_dim;
    const auto query = random_pyramid(c, size, rng), previous = random_pyramid(c, size, rng);
    const auto mask = random_pyramid(c, size, rng);
    FlowInputs<float> flow;
    for (int l = 0; l < kNumLevels; ++l) {
      const auto [h, w] = level_size(size, size, l);
      flow.inverse[l] = Tensor<float>::zeros({2, h, w});
      flow.direct[l] = Tensor<float>::zeros({2, h, w});
    }
    flow.inverse_embedding = random_pyramid(c, size, rng);
    long tokens = 0;
    for (const auto& l : query.levels) tokens += static_cast<long>(l.dim(1)) * l.dim(2);

    auto time = [&](const std::function<void()>& fn) {
      fn();  // warm-up
      std::vector<double> ms;
      for (int r = 0; r < repeats; ++r) {
        const auto t0 = std::chrono::steady_clock::now();
        fn();
        ms.push_back(std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count());
      }
      return ms;
    };
    const auto a = time([&] { attn.cross(query, previous, mask, flow); });
    const auto d = time([&] { dense_attention(attn, query, previous); });
    report.rows.push_back({"adva", size, tokens, median(a), stdev(a)});
    report.rows.push_back({"dense", size, tokens, median(d), stdev(d)});
    pixels.push_back(static_cast<double>(size) * size);
    adva_ms.push_back(median(a));
    dense_ms.push_back(median(d));
  }
  report.adva_exponent = loglog_slope(pixels, adva_ms);
  report.dense_exponent = loglog_slope(pixels, dense_ms);
  return report;
}

nlohmann::json BenchReport::to_json() const {
  nlohmann::json j;
  j["rows"] = nlohmann::json::array();
  for (const auto& r : rows) {
    j["rows"].push_back({{"method", r.method},
                         {"size", r.size},
                         {"tokens", r.tokens},
                         {"median_ms", r.median_ms},
                         {"stdev_ms", r.stdev_ms}});
  }
  j["exponents"] = {{"adva", adva_exponent}, {"dense", dense_exponent}};
  return j;
}

std::string BenchReport::to_table() const {
  std::ostringstream out;
  out << std::left << std::setw(7) << "method" << std::right << std::setw(6) << "size" << std::setw(8) << "tokens"
      << std::setw(12) << "median_ms" << std::setw(10) << "stdev_ms" << "\n";
  out << std::fixed;
  for (const auto& r : rows) {
    out << std::left << std::setw(7) << r.method << std::right << std::setw(6) << r.size << std::setw(8) << r.tokens
        << std::setw(12) << std::setprecision(3) << r.median_ms << std::setw(10) << r.stdev_ms << "\n";
  }
  out << std::setprecision(3) << "exponent adva " << adva_exponent << "  dense " << dense_exponent << "\n";
  return out.str();
}

// ---------------------------------------------------------------------------

Sequence micro_clip(const ModelConfig& config, int frames, std::uint64_t seed) {
  (void)config;
  SyntheticSpec spec;
  spec.name = "micro";
  spec.frames = frames;
  spec.height = 16;
  spec.width = 16;
  spec.seed = seed;
  spec.texture_amplitude = 0.3;
  ShapeSpec a;
  a.width = 7;
  a.height = 6;
  a.cx = 5;
  a.cy = 6;
  a.vx = 1.5;
  a.vy = 0.5;
  ShapeSpec b;
  b.kind = ShapeSpec::Kind::Ellipse;
  b.width = b.height = 6;
  b.cx = 11;
  b.cy = 11;
  b.vx = -1;
  b.spin = 10;
  b.z = 1;
  spec.shapes = {a, b};
  return gen_synthetic(spec);
}

bool GradCheckReport::pass() const {
  return !groups.empty() && std::all_of(groups.begin(), groups.end(), [](const GradGroup& g) { return g.pass; });
}

nlohmann::json GradCheckReport::to_json() const {
  nlohmann::json j;
  j["tolerance"] = tolerance;
  j["pass"] = pass();
  j["groups"] = nlohmann::json::array();
  for (const auto& g : groups) {
    j["groups"].push_back({{"name", g.name}, {"max_rel_error", g.max_rel_error}, {"checked", g.checked},
                           {"pass", g.pass}});
  }
  return j;
}

GradCheckReport gradcheck_model(const ModelConfig& config, std::uint64_t seed, long entries_per_group,
                                double tolerance, double analytic_scale) {
  Model<double> model(config);
  // Zero biases over zero padding and zero-initialized offset heads put the
  // initial point exactly on ReLU and bilinear-floor kinks, where central
  // differences are meaningless. Check at a nearby generic point instead.
  std::mt19937_64 rng(seed ^ 0x5eedULL);
  std::normal_distribution<double> jitter(0.0, 0.05);
  for (auto& p : model.parameters()) {
    for (auto& v : p.value.mutable_data()) v += jitter(rng);
  }
  const Sequence clip = micro_clip(config, 3, seed);
  const LabelPermutation perm = identity_permutation();
  const std::function<Tensor<double>()> loss = [&] { return clip_loss(model, clip, 0, 3, perm); };
  GradCheckReport report;
  report.tolerance = tolerance;
  unsigned probe_seed = static_cast<unsigned>(seed);
  for (const auto& p : model.parameters()) {
    const GradCheckResult r = check_gradient<double>(loss, p.value, 1e-6, entries_per_group, probe_seed++,
                                                     analytic_scale);
    report.groups.push_back({p.name, r.max_rel_error, r.checked, r.max_rel_error <= tolerance});
  }
  return report;
}

}  // namespace devos
