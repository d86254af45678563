#pragma once

// Dense optical flow: analytic synthetic fields, Middlebury .flo I/O, the
// per-level pixel-unit resampling used by the matcher, and the learned
// multi-scale flow embedding.

#include <array>
#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

#include "devos/encoders.hpp"
#include "devos/nn.hpp"

namespace devos {

enum class FlowDirection { Direct, Inverse };  // prev->cur, cur->prev

struct FlowField {
  int height = 0;
  int width = 0;
  std::vector<float> u;  // horizontal displacement, input pixels
  std::vector<float> v;  // vertical displacement
  FlowDirection direction = FlowDirection::Direct;

  static FlowField zeros(int height, int width, FlowDirection dir = FlowDirection::Direct);
  std::size_t index(int y, int x) const { return static_cast<std::size_t>(y) * width + x; }
  bool operator==(const FlowField&) const = default;
};

// A planar map p -> T(p) in (x, y) pixel coordinates.
class Transform {
 public:
  enum class Kind { Translation, Rotation, Affine, Deformation };

  static Transform identity();
  static Transform translation(double dx, double dy);
  // Standard rotation matrix applied in (x, y) pixel axes about (cx, cy).
  static Transform rotation(double degrees, double cx, double cy);
  // x' = a*x + b*y + tx ; y' = c*x + d*y + ty. Throws InputError if singular.
  static Transform affine(double a, double b, double c, double d, double tx, double ty);
  // Bilinearly interpolated random displacements on a (grid x grid) lattice
  // spanning an H x W frame. Amplitude is kept below the contraction limit so
  // the fixed-point inverse converges.
  static Transform deformation(int height, int width, int grid, double amplitude, std::uint64_t seed);

  Kind kind() const { return kind_; }
  std::pair<double, double> apply(double x, double y) const;
  // Exact for affine kinds; 10 fixed-point iterations for deformations.
  std::pair<double, double> apply_inverse(double x, double y) const;

 private:
  std::pair<double, double> displacement(double x, double y) const;

  Kind kind_ = Kind::Affine;
  double a_ = 1, b_ = 0, c_ = 0, d_ = 1, tx_ = 0, ty_ = 0;
  // deformation lattice
  int grid_ = 0;
  double cell_h_ = 1, cell_w_ = 1;
  std::vector<double> gdx_, gdy_;
};

inline constexpr int kInverseFixedPointIterations = 10;

// F_dir(p) = T(p) - p and F_inv(p) = T^-1(p) - p on the H x W pixel grid.
std::pair<FlowField, FlowField> synth_flow(const Transform& transform, int height, int width);

FlowField read_flo(const std::filesystem::path& path);
void write_flo(const std::filesystem::path& path, const FlowField& flow);

// Adds i.i.d. N(0, sigma^2) to both components.
FlowField add_flow_noise(const FlowField& flow, double sigma, std::uint64_t seed);

// Zero-pads to (padded_h, padded_w), average-pools by each level stride and
// divides displacements by the stride. Each level is [2, h_l, w_l] holding
// (dy, dx) in that level's pixels.
template <typename T>
std::array<Tensor<T>, kNumLevels> flow_levels(const FlowField& flow, int padded_h, int padded_w);

// Learned multi-scale motion representation from per-level flow.
template <typename T>
class FlowEmbedder {
 public:
  FlowEmbedder() = default;
  FlowEmbedder(Initializer& init, int embed_dim);

  FeaturePyramid<T> operator()(const std::array<Tensor<T>, kNumLevels>& level_flow) const;
  FeaturePyramid<T> operator()(const FlowField& flow, int padded_h, int padded_w) const {
    return (*this)(flow_levels<T>(flow, padded_h, padded_w));
  }
  void collect(const std::string& prefix, ParamList<T>& out) const;

 private:
  std::array<Conv2d<T>, kNumLevels> conv_;
  std::array<Conv2d<T>, kNumLevels> mix_;
};

}  // namespace devos
