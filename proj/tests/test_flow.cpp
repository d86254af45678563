#include "doctest.h"

#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "devos/flow.hpp"

using namespace devos;

namespace {

std::filesystem::path temp_path(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / "devos_test_flow";
  std::filesystem::create_directories(dir);
  return dir / name;
}

}  // namespace

TEST_CASE("identity transform gives zero flow both ways") {
  auto [dir, inv] = synth_flow(Transform::identity(), 8, 10);
  for (std::size_t i = 0; i < dir.u.size(); ++i) {
    CHECK(dir.u[i] == 0.0f);
    CHECK(dir.v[i] == 0.0f);
    CHECK(inv.u[i] == 0.0f);
    CHECK(inv.v[i] == 0.0f);
  }
  CHECK(inv.direction == FlowDirection::Inverse);
}

TEST_CASE("translation flow is constant") {
  auto [dir, inv] = synth_flow(Transform::translation(5, 0), 6, 7);
  for (std::size_t i = 0; i < dir.u.size(); ++i) {
    CHECK(dir.u[i] == 5.0f);
    CHECK(dir.v[i] == 0.0f);
    CHECK(inv.u[i] == -5.0f);
    CHECK(inv.v[i] == 0.0f);
  }
}

TEST_CASE("rotation direct and inverse flows compose to identity") {
  const int h = 40, w = 50;
  auto t = Transform::rotation(10.0, 25, 20);
  auto [dir, inv] = synth_flow(t, h, w);
  // p + F_inv(p) mapped forward by T returns p.
  double worst = 0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const auto i = inv.index(y, x);
      const auto [fx, fy] = t.apply(x + inv.u[i], y + inv.v[i]);
      worst = std::max({worst, std::abs(fx - x), std::abs(fy - y)});
    }
  }
  CHECK(worst <= 1e-4);
  // Rotation about the center leaves the center fixed.
  const auto i = dir.index(20, 25);
  CHECK(std::abs(dir.u[i]) < 1e-5);
  CHECK(std::abs(dir.v[i]) < 1e-5);
}

TEST_CASE("deformation inverse is accurate and amplitude is bounded") {
  auto t = Transform::deformation(64, 64, 4, 2.0, 3);
  double worst = 0;
  for (int y = 0; y < 64; y += 3) {
    for (int x = 0; x < 64; x += 3) {
      const auto [qx, qy] = t.apply_inverse(x, y);
      const auto [px, py] = t.apply(qx, qy);
      worst = std::max({worst, std::abs(px - x), std::abs(py - y)});
    }
  }
  CHECK(worst <= 1e-4);
  CHECK_THROWS_AS(Transform::deformation(64, 64, 4, 50.0, 3), InputError);
  CHECK_THROWS_AS(Transform::affine(1, 2, 2, 4, 0, 0), InputError);
}

TEST_CASE(".flo round trip is bit exact") {
  FlowField f = FlowField::zeros(5, 7);
  for (std::size_t i = 0; i < f.u.size(); ++i) {
    f.u[i] = std::nextafter(static_cast<float>(i) * 0.37f, 1e9f);
    f.v[i] = -1.0f / (1.0f + static_cast<float>(i));
  }
  f.u[3] = -0.0f;
  const auto path = temp_path("rt.flo");
  write_flo(path, f);
  FlowField g = read_flo(path);
  CHECK(g.height == 5);
  CHECK(g.width == 7);
  CHECK(std::memcmp(g.u.data(), f.u.data(), f.u.size() * 4) == 0);
  CHECK(std::memcmp(g.v.data(), f.v.data(), f.v.size() * 4) == 0);
  CHECK(std::filesystem::file_size(path) == 12u + 5u * 7u * 8u);
}

TEST_CASE("zero .flo file reads as zeros") {
  const auto path = temp_path("zeros.flo");
  write_flo(path, FlowField::zeros(3, 4));
  auto f = read_flo(path);
  for (float v : f.u) CHECK(v == 0.0f);
  for (float v : f.v) CHECK(v == 0.0f);
}

TEST_CASE(".flo format errors") {
  const auto bad = temp_path("bad.flo");
  {
    std::ofstream out(bad, std::ios::binary);
    const float magic = 1.0f;
    const std::int32_t w = 2, h = 2;
    out.write(reinterpret_cast<const char*>(&magic), 4);
    out.write(reinterpret_cast<const char*>(&w), 4);
    out.write(reinterpret_cast<const char*>(&h), 4);
  }
  CHECK_THROWS_AS(read_flo(bad), FormatError);

  const auto trunc = temp_path("trunc.flo");
  write_flo(trunc, FlowField::zeros(4, 4));
  std::filesystem::resize_file(trunc, 12 + 20);
  CHECK_THROWS_AS(read_flo(trunc), FormatError);
  std::filesystem::resize_file(trunc, 6);
  CHECK_THROWS_AS(read_flo(trunc), FormatError);
  CHECK_THROWS_AS(read_flo(temp_path("missing.flo")), FormatError);
}

TEST_CASE("flow levels pool and rescale to level pixels") {
  auto [dir, inv] = synth_flow(Transform::translation(16, -8), 64, 64);
  auto levels = flow_levels<double>(dir, 64, 64);
  const double expect_dx[] = {2.0, 1.0, 0.5};
  const double expect_dy[] = {-1.0, -0.5, -0.25};
  for (int l = 0; l < kNumLevels; ++l) {
    const int s = 64 / kLevelStrides[l];
    CHECK(levels[l].shape() == Shape{2, s, s});
    for (int i = 0; i < s * s; ++i) {
      CHECK(levels[l][i] == doctest::Approx(expect_dy[l]));
      CHECK(levels[l][s * s + i] == doctest::Approx(expect_dx[l]));
    }
  }
  // Padding regions count as zero flow.
  auto [d2, i2] = synth_flow(Transform::translation(8, 0), 32, 48);
  auto padded = flow_levels<double>(d2, 32, 64);
  CHECK(padded[0].shape() == Shape{2, 4, 8});
  CHECK(padded[0][4 * 8 + 0] == doctest::Approx(1.0));
  CHECK(padded[0][4 * 8 + 7] == 0.0);
  CHECK_THROWS_AS(flow_levels<double>(d2, 16, 64), InputError);
}

TEST_CASE("noise is seeded and has the requested spread") {
  FlowField z = FlowField::zeros(64, 64);
  auto a = add_flow_noise(z, 1.0, 4), b = add_flow_noise(z, 1.0, 4), c = add_flow_noise(z, 1.0, 5);
  CHECK(a == b);
  CHECK(!(a == c));
  double ss = 0;
  for (float v : a.u) ss += v * v;
  CHECK(std::sqrt(ss / a.u.size()) == doctest::Approx(1.0).epsilon(0.05));
}

TEST_CASE("flow embedding produces C channels per level") {
  Initializer init(3);
  FlowEmbedder<float> emb(init, 6);
  auto [dir, inv] = synth_flow(Transform::translation(3, 1), 64, 96);
  auto e1 = emb(inv, 64, 96);
  auto e2 = emb(inv, 64, 96);
  CHECK(e1.levels[0].shape() == Shape{6, 8, 12});
  CHECK(e1.levels[2].shape() == Shape{6, 2, 3});
  for (int l = 0; l < kNumLevels; ++l) {
    for (long i = 0; i < e1.levels[l].size(); ++i) CHECK(e1.levels[l][i] == e2.levels[l][i]);
  }
}
