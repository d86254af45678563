#pragma once

// DAVIS-style sequence directories and the synthetic sequence generator.
//
// Layout under a dataset root (the resolution folder is optional):
//   JPEGImages/[480p/]<seq>/%05d.jpg|png
//   Annotations/[480p/]<seq>/%05d.png   (8-bit indexed PNG, DAVIS palette)
//   flow/<seq>/%05d_dir.flo, %05d_inv.flo  (pair t-1 -> t stored at index t)

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "devos/encoders.hpp"
#include "devos/flow.hpp"

namespace devos {

struct Sequence {
  std::string name;
  std::vector<Image> frames;
  std::vector<std::optional<ObjectMask>> annotations;  // one slot per frame
  // Empty, or one entry per frame where entry t is the pair (t-1, t);
  // entry 0 is an empty field.
  std::vector<FlowField> flow_direct;
  std::vector<FlowField> flow_inverse;

  int length() const { return static_cast<int>(frames.size()); }
  int height() const { return frames.empty() ? 0 : frames.front().height; }
  int width() const { return frames.empty() ? 0 : frames.front().width; }
  bool has_flows() const { return flow_direct.size() == frames.size() && !frames.empty(); }
};

// 256-entry DAVIS (PASCAL VOC) palette, RGB triples.
const std::array<std::array<std::uint8_t, 3>, 256>& davis_palette();

Image read_image(const std::filesystem::path& path);  // .png or .jpg/.jpeg
void write_png(const std::filesystem::path& path, const Image& image);
void write_jpeg(const std::filesystem::path& path, const Image& image, int quality = 95);

// Indexed PNG -> labels (palette index = label; 8-bit grayscale also accepted).
ObjectMask read_mask(const std::filesystem::path& path);
void write_mask(const std::filesystem::path& path, const ObjectMask& mask);

// Sequence names from ImageSets/2017/<split>.txt if present, otherwise the
// subdirectories of JPEGImages, sorted.
std::vector<std::string> list_sequences(const std::filesystem::path& root, const std::string& split = "val");

Sequence load_sequence(const std::filesystem::path& root, const std::string& name);
void save_sequence(const std::filesystem::path& root, const Sequence& seq);

// ---------------------------------------------------------------------------
// Synthetic sequences: textured shapes under per-frame similarity transforms.

struct ShapeSpec {
  enum class Kind { Rectangle, Ellipse };
  Kind kind = Kind::Rectangle;
  double width = 16, height = 16;
  double cx = 32, cy = 32;       // center at frame 0, pixels
  double vx = 0, vy = 0;         // pixels per frame
  double angle = 0, spin = 0;    // degrees, degrees per frame
  double scale_rate = 1.0;       // size multiplier per frame
  bool bounce = false;           // reflect the center path at the frame border
  int z = 0;                     // larger is in front
  std::optional<std::uint64_t> texture_seed;  // shapes sharing a seed look identical
};

struct SyntheticSpec {
  std::string name = "synthetic";
  int frames = 10;
  int height = 64;
  int width = 64;
  std::uint64_t seed = 0;
  double texture_amplitude = 0.2;
  std::vector<ShapeSpec> shapes;

  static SyntheticSpec from_json(const nlohmann::json& j);
  nlohmann::json to_json() const;
};

// Exact masks for every frame and exact per-pair flows. Deterministic in the
// spec; throws InputError for more than 15 shapes or empty frames.
Sequence gen_synthetic(const SyntheticSpec& spec);

// The shape-to-image transform of shape k at frame t (canonical coordinates
// centered on the shape, x to the right, y down).
Transform shape_transform(const SyntheticSpec& spec, int shape, int frame);

}  // namespace devos
