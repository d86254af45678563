#pragma once

// DAVIS-protocol region similarity J, boundary accuracy F and J&F, with
// per-object and per-frame bookkeeping and JSON / text-table reports.

#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

#include "devos/encoders.hpp"

namespace devos {

// IoU of the object's pixels; 1 if both are empty, 0 if exactly one is.
double region_j(const ObjectMask& pred, const ObjectMask& gt, int object_id);

// Boundary pixels of the object: mask XOR its 4-connected erosion (pixels
// outside the frame count as inside, so the frame edge is not a boundary).
std::vector<std::uint8_t> boundary_map(const ObjectMask& mask, int object_id);

// Boundary matching radius used by default: ceil(0.008 * image diagonal).
int boundary_tolerance(int height, int width);

// Boundary F-measure with disk-dilation matching; `tolerance` overrides the
// diagonal-based radius.
double boundary_f(const ObjectMask& pred, const ObjectMask& gt, int object_id,
                  std::optional<int> tolerance = std::nullopt);

struct ObjectScore {
  int object_id = 0;
  std::vector<double> j;  // per evaluated frame
  std::vector<double> f;
  double j_mean() const;
  double f_mean() const;
};

struct SequenceReport {
  std::string name;
  std::vector<int> frames;  // evaluated frame indices
  std::vector<ObjectScore> objects;
  double j_mean() const;  // mean over objects
  double f_mean() const;
  double jf() const { return (j_mean() + f_mean()) / 2.0; }
};

struct EvalReport {
  std::vector<SequenceReport> sequences;
  // Means over every object of every sequence (DAVIS convention).
  double j_mean() const;
  double f_mean() const;
  double jf() const { return (j_mean() + f_mean()) / 2.0; }

  nlohmann::json to_json() const;
  std::string to_table() const;
};

// Scores frames 1..T-1 (frame 0 is the given annotation) for every object in
// the frame-0 ground truth. Sizes must match per frame.
SequenceReport evaluate_sequence(const std::string& name, const std::vector<ObjectMask>& predictions,
                                 const std::vector<ObjectMask>& ground_truth,
                                 std::optional<int> tolerance = std::nullopt);

}  // namespace devos
