#include "devos/flow.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numbers>
#include <random>

namespace devos {

namespace {
constexpr float kFloMagic = 202021.25f;

static_assert(std::endian::native == std::endian::little, ".flo I/O assumes a little-endian host");
}  // namespace

FlowField FlowField::zeros(int height, int width, FlowDirection dir) {
  FlowField f;
  f.height = height;
  f.width = width;
  f.u.assign(static_cast<std::size_t>(height) * width, 0.0f);
  f.v.assign(static_cast<std::size_t>(height) * width, 0.0f);
  f.direction = dir;
  return f;
}

Transform Transform::identity() { return affine(1, 0, 0, 1, 0, 0); }

Transform Transform::translation(double dx, double dy) {
  Transform t = affine(1, 0, 0, 1, dx, dy);
  t.kind_ = Kind::Translation;
  return t;
}

Transform Transform::rotation(double degrees, double cx, double cy) {
  const double r = degrees * std::numbers::pi / 180.0;
  const double cs = std::cos(r), sn = std::sin(r);
  // p' = R (p - c) + c
  Transform t = affine(cs, -sn, sn, cs, cx - cs * cx + sn * cy, cy - sn * cx - cs * cy);
  t.kind_ = Kind::Rotation;
  return t;
}

Transform Transform::affine(double a, double b, double c, double d, double tx, double ty) {
  const double det = a * d - b * c;
  if (!std::isfinite(det) || std::abs(det) < 1e-9) throw InputError("affine transform is not invertible");
  Transform t;
  t.kind_ = Kind::Affine;
  t.a_ = a;
  t.b_ = b;
  t.c_ = c;
  t.d_ = d;
  t.tx_ = tx;
  t.ty_ = ty;
  return t;
}

Transform Transform::deformation(int height, int width, int grid, double amplitude, std::uint64_t seed) {
  if (grid < 2 || height <= 0 || width <= 0) throw InputError("deformation lattice needs grid >= 2");
  Transform t;
  t.kind_ = Kind::Deformation;
  t.grid_ = grid;
  t.cell_h_ = static_cast<double>(height - 1) / (grid - 1);
  t.cell_w_ = static_cast<double>(width - 1) / (grid - 1);
  // Lipschitz constant of the bilinear field is <= 2*amp/cell; capping it at
  // 0.25 makes 10 fixed-point steps accurate to ~1e-6 * amplitude.
  const double limit = 0.125 * std::min(t.cell_h_, t.cell_w_);
  if (!(amplitude >= 0.0) || amplitude > limit) {
    throw InputError("deformation amplitude " + std::to_string(amplitude) + " exceeds invertibility limit " +
                     std::to_string(limit));
  }
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> dist(-amplitude, amplitude);
  for (int i = 0; i < grid * grid; ++i) {
    t.gdx_.push_back(dist(rng));
    t.gdy_.push_back(dist(rng));
  }
  return t;
}

std::pair<double, double> Transform::displacement(double x, double y) const {
  if (kind_ != Kind::Deformation) {
    return {a_ * x + b_ * y + tx_ - x, c_ * x + d_ * y + ty_ - y};
  }
  const double gy = std::clamp(y / cell_h_, 0.0, double(grid_ - 1));
  const double gx = std::clamp(x / cell_w_, 0.0, double(grid_ - 1));
  const int y0 = std::min(static_cast<int>(gy), grid_ - 2);
  const int x0 = std::min(static_cast<int>(gx), grid_ - 2);
  const double fy = gy - y0, fx = gx - x0;
  auto lerp = [&](const std::vector<double>& g) {
    const double top = (1 - fx) * g[y0 * grid_ + x0] + fx * g[y0 * grid_ + x0 + 1];
    const double bot = (1 - fx) * g[(y0 + 1) * grid_ + x0] + fx * g[(y0 + 1) * grid_ + x0 + 1];
    return (1 - fy) * top + fy * bot;
  };
  return {lerp(gdx_), lerp(gdy_)};
}

std::pair<double, double> Transform::apply(double x, double y) const {
  const auto [dx, dy] = displacement(x, y);
  return {x + dx, y + dy};
}

std::pair<double, double> Transform::apply_inverse(double x, double y) const {
  if (kind_ != Kind::Deformation) {
    const double det = a_ * d_ - b_ * c_;
    const double rx = x - tx_, ry = y - ty_;
    return {(d_ * rx - b_ * ry) / det, (-c_ * rx + a_ * ry) / det};
  }
  // q = p - d(q)
  double qx = x, qy = y;
  for (int it = 0; it < kInverseFixedPointIterations; ++it) {
    const auto [dx, dy] = displacement(qx, qy);
    qx = x - dx;
    qy = y - dy;
  }
  return {qx, qy};
}

std::pair<FlowField, FlowField> synth_flow(const Transform& transform, int height, int width) {
  if (height <= 0 || width <= 0) throw InputError("synth_flow: empty frame");
  FlowField dir = FlowField::zeros(height, width, FlowDirection::Direct);
  FlowField inv = FlowField::zeros(height, width, FlowDirection::Inverse);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      const auto i = dir.index(y, x);
      const auto [fx, fy] = transform.apply(x, y);
      dir.u[i] = static_cast<float>(fx - x);
      dir.v[i] = static_cast<float>(fy - y);
      const auto [bx, by] = transform.apply_inverse(x, y);
      inv.u[i] = static_cast<float>(bx - x);
      inv.v[i] = static_cast<float>(by - y);
    }
  }
  return {std::move(dir), std::move(inv)};
}

FlowField read_flo(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  float magic = 0.0f;
  std::int32_t width = 0, height = 0;
  in.read(reinterpret_cast<char*>(&magic), 4);
  in.read(reinterpret_cast<char*>(&width), 4);
  in.read(reinterpret_cast<char*>(&height), 4);
  if (!in) throw FormatError(path.string() + ": truncated header");
  if (magic != kFloMagic) throw FormatError(path.string() + ": bad .flo magic");
  if (width <= 0 || height <= 0 || static_cast<long>(width) * height > (1L << 28)) {
    throw FormatError(path.string() + ": implausible size " + std::to_string(width) + "x" + std::to_string(height));
  }
  std::vector<float> interleaved(static_cast<std::size_t>(width) * height * 2);
  in.read(reinterpret_cast<char*>(interleaved.data()), static_cast<std::streamsize>(interleaved.size() * 4));
  if (in.gcount() != static_cast<std::streamsize>(interleaved.size() * 4)) {
    throw FormatError(path.string() + ": truncated flow data");
  }
  FlowField f = FlowField::zeros(height, width);
  for (std::size_t i = 0; i < f.u.size(); ++i) {
    f.u[i] = interleaved[2 * i];
    f.v[i] = interleaved[2 * i + 1];
  }
  return f;
}

void write_flo(const std::filesystem::path& path, const FlowField& flow) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path.string());
  const std::int32_t width = flow.width, height = flow.height;
  out.write(reinterpret_cast<const char*>(&kFloMagic), 4);
  out.write(reinterpret_cast<const char*>(&width), 4);
  out.write(reinterpret_cast<const char*>(&height), 4);
  std::vector<float> interleaved(flow.u.size() * 2);
  for (std::size_t i = 0; i < flow.u.size(); ++i) {
    interleaved[2 * i] = flow.u[i];
    interleaved[2 * i + 1] = flow.v[i];
  }
  out.write(reinterpret_cast<const char*>(interleaved.data()), static_cast<std::streamsize>(interleaved.size() * 4));
  if (!out) throw InputError("write failed for " + path.string());
}

FlowField add_flow_noise(const FlowField& flow, double sigma, std::uint64_t seed) {
  FlowField out = flow;
  if (sigma <= 0.0) return out;
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, sigma);
  for (std::size_t i = 0; i < out.u.size(); ++i) {
    out.u[i] = static_cast<float>(out.u[i] + dist(rng));
    out.v[i] = static_cast<float>(out.v[i] + dist(rng));
  }
  return out;
}

template <typename T>
std::array<Tensor<T>, kNumLevels> flow_levels(const FlowField& flow, int padded_h, int padded_w) {
  if (padded_h < flow.height || padded_w < flow.width) {
    throw InputError("flow_levels: flow " + std::to_string(flow.height) + "x" + std::to_string(flow.width) +
                     " larger than target " + std::to_string(padded_h) + "x" + std::to_string(padded_w));
  }
  const std::size_t plane = static_cast<std::size_t>(flow.height) * flow.width;
  std::vector<T> v(2 * plane);
  for (std::size_t i = 0; i < plane; ++i) {
    v[i] = static_cast<T>(flow.v[i]);
    v[plane + i] = static_cast<T>(flow.u[i]);
  }
  NoGradGuard no_grad;
  Tensor<T> full = pad_to(Tensor<T>({2, flow.height, flow.width}, std::move(v)), padded_h, padded_w);
  std::array<Tensor<T>, kNumLevels> out;
  for (int l = 0; l < kNumLevels; ++l) {
    const int s = kLevelStrides[l];
    out[l] = scale(avg_pool(full, s), static_cast<T>(1.0 / s));
  }
  return out;
}

template <typename T>
FlowEmbedder<T>::FlowEmbedder(Initializer& init, int embed_dim) {
  for (int l = 0; l < kNumLevels; ++l) {
    conv_[l] = Conv2d<T>(init, 2, embed_dim, 3, 1, 1);
    mix_[l] = Conv2d<T>(init, embed_dim, embed_dim, 1, 1, 0);
  }
}

template <typename T>
FeaturePyramid<T> FlowEmbedder<T>::operator()(const std::array<Tensor<T>, kNumLevels>& level_flow) const {
  FeaturePyramid<T> out;
  for (int l = 0; l < kNumLevels; ++l) out.levels[l] = mix_[l](relu(conv_[l](level_flow[l])));
  return out;
}

template <typename T>
void FlowEmbedder<T>::collect(const std::string& prefix, ParamList<T>& out) const {
  for (int l = 0; l < kNumLevels; ++l) {
    conv_[l].collect(prefix + ".conv" + std::to_string(l), out);
    mix_[l].collect(prefix + ".mix" + std::to_string(l), out);
  }
}

template std::array<Tensor<float>, kNumLevels> flow_levels<float>(const FlowField&, int, int);
template std::array<Tensor<double>, kNumLevels> flow_levels<double>(const FlowField&, int, int);
template class FlowEmbedder<float>;
template class FlowEmbedder<double>;

}  // namespace devos
