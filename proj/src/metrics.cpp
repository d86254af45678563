#include "devos/metrics.hpp"

#include <cmath>
#include <iomanip>
#include <numeric>
#include <sstream>

namespace devos {

namespace {

void require_same_size(const ObjectMask& a, const ObjectMask& b) {
  if (a.height() != b.height() || a.width() != b.width()) {
    throw InputError("mask sizes differ: " + std::to_string(a.height()) + "x" + std::to_string(a.width()) + " vs " +
                     std::to_string(b.height()) + "x" + std::to_string(b.width()));
  }
}

// Stamps a disk of the given radius around every set pixel.
std::vector<std::uint8_t> dilate(const std::vector<std::uint8_t>& map, int height, int width, int radius) {
  std::vector<std::pair<int, int>> disk;
  for (int dy = -radius; dy <= radius; ++dy) {
    for (int dx = -radius; dx <= radius; ++dx) {
      if (dy * dy + dx * dx <= radius * radius) disk.emplace_back(dy, dx);
    }
  }
  std::vector<std::uint8_t> out(map.size(), 0);
  for (int y = 0; y < height; ++y) {
    for (int x = 0; x < width; ++x) {
      if (!map[static_cast<std::size_t>(y) * width + x]) continue;
      for (auto [dy, dx] : disk) {
        const int yy = y + dy, xx = x + dx;
        if (yy >= 0 && yy < height && xx >= 0 && xx < width) out[static_cast<std::size_t>(yy) * width + xx] = 1;
      }
    }
  }
  return out;
}

double mean(const std::vector<double>& v) {
  return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

}  // namespace

double region_j(const ObjectMask& pred, const ObjectMask& gt, int object_id) {
  require_same_size(pred, gt);
  long inter = 0, uni = 0;
  const auto& p = pred.labels();
  const auto& g = gt.labels();
  for (std::size_t i = 0; i < p.size(); ++i) {
    const bool a = p[i] == object_id, b = g[i] == object_id;
    inter += a && b;
    uni += a || b;
  }
  return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

std::vector<std::uint8_t> boundary_map(const ObjectMask& mask, int object_id) {
  const int h = mask.height(), w = mask.width();
  std::vector<std::uint8_t> out(static_cast<std::size_t>(h) * w, 0);
  auto in = [&](int y, int x) {
    y = std::clamp(y, 0, h - 1);
    x = std::clamp(x, 0, w - 1);
    return mask.at(y, x) == object_id;
  };
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      if (!in(y, x)) continue;
      const bool interior = in(y - 1, x) && in(y + 1, x) && in(y, x - 1) && in(y, x + 1);
      out[static_cast<std::size_t>(y) * w + x] = !interior;
    }
  }
  return out;
}

int boundary_tolerance(int height, int width) {
  return static_cast<int>(std::ceil(0.008 * std::hypot(static_cast<double>(height), static_cast<double>(width))));
}

double boundary_f(const ObjectMask& pred, const ObjectMask& gt, int object_id, std::optional<int> tolerance) {
  require_same_size(pred, gt);
  const int h = gt.height(), w = gt.width();
  const int r = tolerance.value_or(boundary_tolerance(h, w));
  const auto bp = boundary_map(pred, object_id);
  const auto bg = boundary_map(gt, object_id);
  const long np = std::accumulate(bp.begin(), bp.end(), 0L);
  const long ng = std::accumulate(bg.begin(), bg.end(), 0L);
  if (np == 0 && ng == 0) return 1.0;
  if (np == 0 || ng == 0) return 0.0;
  const auto dp = dilate(bp, h, w, r);
  const auto dg = dilate(bg, h, w, r);
  long matched_p = 0, matched_g = 0;
  for (std::size_t i = 0; i < bp.size(); ++i) {
    matched_p += bp[i] && dg[i];
    matched_g += bg[i] && dp[i];
  }
  const double precision = static_cast<double>(matched_p) / np;
  const double recall = static_cast<double>(matched_g) / ng;
  return precision + recall == 0.0 ? 0.0 : 2.0 * precision * recall / (precision + recall);
}

double ObjectScore::j_mean() const { return mean(j); }
double ObjectScore::f_mean() const { return mean(f); }

double SequenceReport::j_mean() const {
  std::vector<double> v;
  for (const auto& o : objects) v.push_back(o.j_mean());
  return mean(v);
}

double SequenceReport::f_mean() const {
  std::vector<double> v;
  for (const auto& o : objects) v.push_back(o.f_mean());
  return mean(v);
}

double EvalReport::j_mean() const {
  std::vector<double> v;
  for (const auto& s : sequences) {
    for (const auto& o : s.objects) v.push_back(o.j_mean());
  }
  return mean(v);
}

double EvalReport::f_mean() const {
  std::vector<double> v;
  for (const auto& s : sequences) {
    for (const auto& o : s.objects) v.push_back(o.f_mean());
  }
  return mean(v);
}

nlohmann::json EvalReport::to_json() const {
  nlohmann::json j;
  j["J"] = j_mean();
  j["F"] = f_mean();
  j["J&F"] = jf();
  j["sequences"] = nlohmann::json::array();
  for (const auto& s : sequences) {
    nlohmann::json js;
    js["name"] = s.name;
    js["J"] = s.j_mean();
    js["F"] = s.f_mean();
    js["J&F"] = s.jf();
    js["frames"] = s.frames;
    js["objects"] = nlohmann::json::array();
    for (const auto& o : s.objects) {
      js["objects"].push_back(
          {{"id", o.object_id}, {"J", o.j_mean()}, {"F", o.f_mean()}, {"J_per_frame", o.j}, {"F_per_frame", o.f}});
    }
    j["sequences"].push_back(std::move(js));
  }
  return j;
}

std::string EvalReport::to_table() const {
  std::size_t name_w = 8;
  for (const auto& s : sequences) name_w = std::max(name_w, s.name.size());
  std::ostringstream out;
  out << std::fixed << std::setprecision(3);
  auto row = [&](const std::string& name, const std::string& objects, double jf, double j, double f) {
    out << std::left << std::setw(static_cast<int>(name_w)) << name << "  " << std::right << std::setw(7) << objects
        << "  " << std::setw(6) << jf << "  " << std::setw(6) << j << "  " << std::setw(6) << f << "\n";
  };
  out << std::left << std::setw(static_cast<int>(name_w)) << "sequence" << "  " << std::right << std::setw(7)
      << "objects" << "  " << std::setw(6) << "J&F" << "  " << std::setw(6) << "J" << "  " << std::setw(6) << "F"
      << "\n";
  for (const auto& s : sequences) row(s.name, std::to_string(s.objects.size()), s.jf(), s.j_mean(), s.f_mean());
  long total = 0;
  for (const auto& s : sequences) total += static_cast<long>(s.objects.size());
  row("all", std::to_string(total), jf(), j_mean(), f_mean());
  return out.str();
}

SequenceReport evaluate_sequence(const std::string& name, const std::vector<ObjectMask>& predictions,
                                 const std::vector<ObjectMask>& ground_truth, std::optional<int> tolerance) {
  if (predictions.size() != ground_truth.size() || ground_truth.empty()) {
    throw InputError("sequence " + name + ": " + std::to_string(predictions.size()) + " predictions for " +
                     std::to_string(ground_truth.size()) + " ground-truth frames");
  }
  SequenceReport report;
  report.name = name;
  for (int id : ground_truth.front().object_ids()) report.objects.push_back(ObjectScore{id, {}, {}});
  for (std::size_t t = 1; t < ground_truth.size(); ++t) {
    report.frames.push_back(static_cast<int>(t));
    for (auto& o : report.objects) {
      o.j.push_back(region_j(predictions[t], ground_truth[t], o.object_id));
      o.f.push_back(boundary_f(predictions[t], ground_truth[t], o.object_id, tolerance));
    }
  }
  return report;
}

}  // namespace devos
