#include "doctest.h"

#include <cmath>
#include <random>

#include "devos/metrics.hpp"

using namespace devos;

namespace {

ObjectMask rect(int h, int w, int y0, int x0, int rh, int rw, int id = 1, ObjectMask base = {}) {
  if (base.height() == 0) base = ObjectMask::background(h, w);
  for (int y = y0; y < y0 + rh; ++y) {
    for (int x = x0; x < x0 + rw; ++x) {
      if (y >= 0 && y < h && x >= 0 && x < w) base.set(y, x, static_cast<std::uint8_t>(id));
    }
  }
  return base;
}

ObjectMask random_blobs(int h, int w, std::mt19937_64& rng) {
  std::uniform_int_distribution<int> py(0, h - 1), px(0, w - 1), sz(2, 8);
  ObjectMask m = ObjectMask::background(h, w);
  for (int i = 0; i < 3; ++i) m = rect(h, w, py(rng), px(rng), sz(rng), sz(rng), 1, m);
  return m;
}

// Direct definition: a boundary pixel matches if some boundary pixel of the
// other mask lies within Euclidean distance r.
double brute_f(const ObjectMask& a, const ObjectMask& b, int id, int r) {
  const int h = a.height(), w = a.width();
  auto boundary = [&](const ObjectMask& m) {
    std::vector<std::pair<int, int>> pts;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        if (m.at(y, x) != id) continue;
        bool edge = false;
        const int dy[] = {-1, 1, 0, 0}, dx[] = {0, 0, -1, 1};
        for (int k = 0; k < 4; ++k) {
          const int yy = y + dy[k], xx = x + dx[k];
          if (yy >= 0 && yy < h && xx >= 0 && xx < w && m.at(yy, xx) != id) edge = true;
        }
        if (edge) pts.emplace_back(y, x);
      }
    }
    return pts;
  };
  const auto pa = boundary(a), pb = boundary(b);
  if (pa.empty() && pb.empty()) return 1.0;
  if (pa.empty() || pb.empty()) return 0.0;
  auto matched = [&](const auto& from, const auto& to) {
    int n = 0;
    for (auto [y, x] : from) {
      for (auto [yy, xx] : to) {
        if ((y - yy) * (y - yy) + (x - xx) * (x - xx) <= r * r) {
          ++n;
          break;
        }
      }
    }
    return static_cast<double>(n);
  };
  const double p = matched(pa, pb) / pa.size(), rc = matched(pb, pa) / pb.size();
  return p + rc == 0 ? 0.0 : 2 * p * rc / (p + rc);
}

}  // namespace

TEST_CASE("region J on hand-computed overlaps") {
  const auto a = rect(8, 8, 0, 0, 2, 4);  // 8 px
  const auto b = rect(8, 8, 0, 2, 2, 4);  // 8 px, 4 shared
  CHECK(region_j(a, b, 1) == doctest::Approx(4.0 / 12.0));
  CHECK(region_j(a, a, 1) == 1.0);
  CHECK(region_j(a, b, 2) == 1.0);  // absent in both
  CHECK(region_j(a, ObjectMask::background(8, 8), 1) == 0.0);
  CHECK(region_j(ObjectMask::background(8, 8), a, 1) == 0.0);
  CHECK_THROWS_AS(region_j(a, ObjectMask::background(8, 9), 1), InputError);
}

TEST_CASE("boundary tolerance follows the image diagonal") {
  CHECK(boundary_tolerance(480, 854) == 8);  // 0.008 * 979.6 = 7.84
  CHECK(boundary_tolerance(64, 64) == 1);
  CHECK(boundary_tolerance(300, 400) == 4);  // exactly 4.0
}

TEST_CASE("boundary map of a rectangle is its perimeter") {
  const auto m = rect(20, 20, 5, 5, 6, 4);
  const auto b = boundary_map(m, 1);
  int n = 0;
  for (auto v : b) n += v;
  CHECK(n == 2 * 6 + 2 * 4 - 4);
  // Frame edges are not boundaries: a full-frame object has none.
  const auto full = rect(6, 6, 0, 0, 6, 6);
  for (auto v : boundary_map(full, 1)) CHECK(v == 0);
  CHECK(boundary_f(full, full, 1) == 1.0);
}

TEST_CASE("boundary F on identical, empty and shifted masks") {
  const auto gt = rect(40, 40, 10, 10, 10, 10);
  CHECK(boundary_f(gt, gt, 1) == 1.0);
  CHECK(boundary_f(ObjectMask::background(40, 40), gt, 1) == 0.0);
  CHECK(boundary_f(gt, ObjectMask::background(40, 40), 1) == 0.0);
  CHECK(boundary_f(ObjectMask::background(40, 40), ObjectMask::background(40, 40), 1) == 1.0);

  const auto shifted = rect(40, 40, 10, 11, 10, 10);
  // Tolerance 1 absorbs a one-pixel shift entirely.
  CHECK(boundary_f(shifted, gt, 1, 1) == 1.0);
  // Without tolerance, 18 of 36 perimeter pixels coincide on each side.
  CHECK(boundary_f(shifted, gt, 1, 0) == doctest::Approx(0.5));
}

TEST_CASE("boundary F matches a brute-force nearest-boundary oracle") {
  std::mt19937_64 rng(11);
  for (int trial = 0; trial < 40; ++trial) {
    const auto a = random_blobs(24, 30, rng), b = random_blobs(24, 30, rng);
    for (int r : {0, 1, 2, 3}) {
      CHECK(boundary_f(a, b, 1, r) == doctest::Approx(brute_f(a, b, 1, r)).epsilon(1e-12));
    }
  }
}

TEST_CASE("J and F are symmetric and bounded") {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 30; ++trial) {
    const auto a = random_blobs(20, 20, rng), b = random_blobs(20, 20, rng);
    const double j = region_j(a, b, 1), f = boundary_f(a, b, 1, 1);
    CHECK(j == region_j(b, a, 1));
    CHECK(f == doctest::Approx(boundary_f(b, a, 1, 1)));
    CHECK(j >= 0.0);
    CHECK(j <= 1.0);
    CHECK(f >= 0.0);
    CHECK(f <= 1.0);
  }
}

TEST_CASE("scores are invariant to background padding at fixed tolerance") {
  std::mt19937_64 rng(9);
  auto pad = [](const ObjectMask& m, int p) {
    ObjectMask out = ObjectMask::background(m.height() + 2 * p, m.width() + 2 * p);
    for (int y = 0; y < m.height(); ++y) {
      for (int x = 0; x < m.width(); ++x) out.set(y + p, x + p, m.at(y, x));
    }
    return out;
  };
  for (int trial = 0; trial < 10; ++trial) {
    // Keep objects off the frame edge so padding does not create boundaries.
    auto a = rect(24, 24, 3 + trial % 5, 4, 9, 12);
    auto b = rect(24, 24, 5, 2 + trial % 7, 11, 8);
    CHECK(region_j(pad(a, 7), pad(b, 7), 1) == region_j(a, b, 1));
    CHECK(boundary_f(pad(a, 7), pad(b, 7), 1, 2) == doctest::Approx(boundary_f(a, b, 1, 2)));
  }
  (void)rng;
}

TEST_CASE("sequence evaluation skips the first frame and averages per object") {
  const int h = 32, w = 32;
  std::vector<ObjectMask> gt, pred;
  for (int t = 0; t < 3; ++t) {
    gt.push_back(rect(h, w, 18, 18, 6, 6, 2, rect(h, w, 4, 4 + t, 8, 8, 1)));
  }
  pred.push_back(ObjectMask::background(h, w));           // frame 0 is ignored
  pred.push_back(gt[1]);                                  // perfect
  pred.push_back(rect(h, w, 4, 6, 8, 8, 1));              // object 2 missing
  const auto rep = evaluate_sequence("toy", pred, gt);
  REQUIRE(rep.objects.size() == 2);
  CHECK(rep.frames == std::vector<int>{1, 2});
  CHECK(rep.objects[0].object_id == 1);
  CHECK(rep.objects[0].j_mean() == 1.0);
  CHECK(rep.objects[1].j == std::vector<double>{1.0, 0.0});
  CHECK(rep.j_mean() == doctest::Approx(0.75));
  CHECK(rep.f_mean() == doctest::Approx(0.75));
  CHECK(rep.jf() == doctest::Approx((rep.j_mean() + rep.f_mean()) / 2));

  CHECK_THROWS_AS(evaluate_sequence("bad", {pred[0]}, gt), InputError);

  EvalReport report;
  report.sequences.push_back(rep);
  report.sequences.push_back(evaluate_sequence("copy", gt, gt));
  // Mean over all four objects, not over sequences.
  CHECK(report.j_mean() == doctest::Approx((1.0 + 0.5 + 1.0 + 1.0) / 4));
  const auto j = report.to_json();
  CHECK(j["J&F"].get<double>() == doctest::Approx(report.jf()));
  CHECK(j["sequences"].size() == 2);
  CHECK(j["sequences"][0]["objects"][1]["J_per_frame"][1].get<double>() == 0.0);
  const auto table = report.to_table();
  CHECK(table.find("toy") != std::string::npos);
  CHECK(table.find("all") != std::string::npos);
}
