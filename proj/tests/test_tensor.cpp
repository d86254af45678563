#include <cmath>
#include <random>
#include <set>
#include <thread>

#include "devos/gradcheck.hpp"
#include "devos/ops.hpp"
#include "doctest.h"

using namespace devos;

namespace {

template <typename T = double>
Tensor<T> random_tensor(const Shape& shape, unsigned seed, double lo = -1.0, double hi = 1.0, bool track = true) {
  std::mt19937 rng(seed);
  std::uniform_real_distribution<double> dist(lo, hi);
  std::vector<T> v(static_cast<std::size_t>(numel(shape)));
  for (auto& x : v) x = static_cast<T>(dist(rng));
  return Tensor<T>(shape, std::move(v), track);
}

// Fixed random weights turn any output into a scalar with a generic gradient.
Tensor<double> probe(const Tensor<double>& y, unsigned seed = 99) {
  return sum(mul(y, random_tensor(y.shape(), seed, -1.0, 1.0, false)));
}

constexpr double kFdStep = 1e-3;
constexpr double kPrimitiveTol = 1e-3;

void expect_grad_ok(const std::function<Tensor<double>()>& f, const Tensor<double>& input) {
  const auto r = check_gradient<double>(f, input, kFdStep);
  INFO("worst index " << r.worst_index << " analytic " << r.worst_analytic << " numeric " << r.worst_numeric);
  CHECK(r.max_rel_error <= kPrimitiveTol);
}

// Scalar-loop bilinear oracle with the same clamping policy.
double bilinear_oracle(const Tensor<double>& f, int c, double y, double x) {
  const int h = f.dim(1), w = f.dim(2);
  y = std::clamp(y, 0.0, double(h - 1));
  x = std::clamp(x, 0.0, double(w - 1));
  const int y0 = int(std::floor(y)), x0 = int(std::floor(x));
  const int y1 = std::min(y0 + 1, h - 1), x1 = std::min(x0 + 1, w - 1);
  const double dy = y - y0, dx = x - x0;
  auto at = [&](int yy, int xx) { return f[(long(c) * h + yy) * w + xx]; };
  return (1 - dy) * ((1 - dx) * at(y0, x0) + dx * at(y0, x1)) + dy * ((1 - dx) * at(y1, x0) + dx * at(y1, x1));
}

}  // namespace

TEST_CASE("matmul identity and hand-computed products") {
  Tensor<float> eye({2, 2}, {1, 0, 0, 1});
  Tensor<float> b({2, 2}, {3, 4, 5, 6});
  auto c = matmul(eye, b);
  CHECK(std::vector<float>(c.data().begin(), c.data().end()) == std::vector<float>{3, 4, 5, 6});

  auto d = matmul(Tensor<float>({1, 2}, {1, 2}), Tensor<float>({2, 1}, {3, 4}));
  CHECK(d.shape() == Shape{1, 1});
  CHECK(d.item() == 11.0f);
}

TEST_CASE("matmul matches a triple-loop reference") {
  auto a = random_tensor<float>({3, 4}, 1);
  auto b = random_tensor<float>({4, 2}, 2);
  auto c = matmul(a, b);
  for (int i = 0; i < 3; ++i) {
    for (int j = 0; j < 2; ++j) {
      double ref = 0.0;
      for (int k = 0; k < 4; ++k) ref += double(a[i * 4 + k]) * b[k * 2 + j];
      CHECK(std::abs(c[i * 2 + j] - ref) <= 1e-6);
    }
  }
}

TEST_CASE("matmul broadcasts a 2-D operand across batches") {
  auto a = random_tensor({5, 3, 4}, 3);
  auto b = random_tensor({4, 2}, 4);
  auto c = matmul(a, b);
  CHECK(c.shape() == Shape{5, 3, 2});
  auto c3 = matmul(slice(a, 0, 3, 4), b);
  for (int i = 0; i < 6; ++i) CHECK(c[3 * 6 + i] == doctest::Approx(c3[i]).epsilon(1e-12));
}

TEST_CASE("matmul shape mismatch names both shapes") {
  auto a = Tensor<float>::zeros({2, 3});
  auto b = Tensor<float>::zeros({4, 2});
  try {
    matmul(a, b);
    FAIL("expected DimensionError");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[4,2]") != std::string::npos);
  }
}

TEST_CASE("softmax worked examples") {
  auto u = softmax(Tensor<float>({3}, {0, 0, 0}));
  for (int i = 0; i < 3; ++i) CHECK(u[i] == doctest::Approx(1.0 / 3.0).epsilon(1e-6));

  auto big = softmax(Tensor<float>({2}, {1000, 1000}));
  CHECK(big[0] == 0.5f);
  CHECK(big[1] == 0.5f);

  auto s = softmax(Tensor<float>({3}, {1, 2, 3}));
  const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
  for (int i = 0; i < 3; ++i) CHECK(std::abs(s[i] - std::exp(i + 1.0) / z) <= 1e-6);
}

TEST_CASE("softmax rows sum to one and are shift invariant") {
  for (unsigned seed = 0; seed < 20; ++seed) {
    auto x = random_tensor<float>({4, 7}, seed, -30.0, 30.0, false);
    auto y = softmax(x, 1);
    auto y_shift = softmax(add(x, Tensor<float>::full({7}, 12.5f)), 1);
    for (int r = 0; r < 4; ++r) {
      double total = 0.0;
      for (int c = 0; c < 7; ++c) {
        total += y[r * 7 + c];
        CHECK(y[r * 7 + c] > 0.0f);
        CHECK(std::abs(y[r * 7 + c] - y_shift[r * 7 + c]) <= 1e-6);
      }
      CHECK(std::abs(total - 1.0) <= 1e-6);
    }
  }
}

TEST_CASE("tanh values, range and gradient") {
  auto x = Tensor<double>({3}, {0.0, 0.5, 40.0}, true);
  auto y = tanh(x);
  CHECK(y[0] == 0.0);
  CHECK(std::abs(y[1] - 0.46211716) <= 1e-6);
  CHECK(y[2] < 1.0);
  backward(sum(y));
  CHECK(x.grad()[0] == doctest::Approx(1.0));
  CHECK(x.grad()[2] < 1e-12);

  auto f = tanh(Tensor<float>({2}, {50.0f, -50.0f}));
  CHECK(f[0] < 1.0f);
  CHECK(f[1] > -1.0f);
  auto odd = tanh(Tensor<double>({2}, {0.7, -0.7}));
  CHECK(odd[0] == -odd[1]);
}

TEST_CASE("bilinear_sample exact at integers and symmetric at the cell center") {
  auto f = random_tensor<float>({3, 4, 5}, 7);
  auto pts = Tensor<float>({2, 2}, {2, 3, 0, 4});
  auto s = bilinear_sample(f, pts);
  for (int c = 0; c < 3; ++c) {
    CHECK(s[0 * 3 + c] == f[(c * 4 + 2) * 5 + 3]);
    CHECK(s[1 * 3 + c] == f[(c * 4 + 0) * 5 + 4]);
  }
  auto sq = Tensor<float>({1, 2, 2}, {1, 2, 3, 4});
  auto mid = bilinear_sample(sq, Tensor<float>({1, 2}, {0.5f, 0.5f}));
  CHECK(mid.item() == doctest::Approx(2.5f));
}

TEST_CASE("bilinear_sample matches a scalar-loop oracle on random points") {
  auto f = random_tensor({3, 5, 7}, 11, -1, 1, false);
  auto pts = random_tensor({20, 2}, 12, -1.5, 7.5, false);
  auto s = bilinear_sample(f, pts);
  for (int p = 0; p < 20; ++p) {
    for (int c = 0; c < 3; ++c) CHECK(std::abs(s[p * 3 + c] - bilinear_oracle(f, c, pts[2 * p], pts[2 * p + 1])) <= 1e-6);
  }
}

TEST_CASE("bilinear_sample is linear along an axis between neighbours") {
  auto f = random_tensor({2, 4, 4}, 13, -1, 1, false);
  for (double t : {0.1, 0.37, 0.8}) {
    auto a = bilinear_sample(f, Tensor<double>({1, 2}, {1.0, 2.0}));
    auto b = bilinear_sample(f, Tensor<double>({1, 2}, {1.0, 3.0}));
    auto m = bilinear_sample(f, Tensor<double>({1, 2}, {1.0, 2.0 + t}));
    for (int c = 0; c < 2; ++c) CHECK(m[c] == doctest::Approx((1 - t) * a[c] + t * b[c]).epsilon(1e-12));
  }
}

TEST_CASE("bilinear_sample rejects non-finite coordinates") {
  auto f = Tensor<float>::zeros({1, 2, 2});
  CHECK_THROWS_AS(bilinear_sample(f, Tensor<float>({1, 2}, {NAN, 0.0f})), InputError);
}

TEST_CASE("bilinear_sample clamps and zeroes coordinate gradient beyond the border") {
  auto f = random_tensor({1, 3, 3}, 14, -1, 1, false);
  auto pts = Tensor<double>({1, 2}, {-2.0, 1.5}, true);
  auto s = bilinear_sample(f, pts);
  CHECK(s[0] == doctest::Approx(bilinear_oracle(f, 0, 0.0, 1.5)));
  backward(sum(s));
  CHECK(pts.grad()[0] == 0.0);
  CHECK(pts.grad()[1] != 0.0);
}

TEST_CASE("backward worked examples and accumulation") {
  auto x = Tensor<double>({3}, {1, 2, 3}, true);
  backward(sum(x));
  CHECK(std::vector<double>(x.grad().begin(), x.grad().end()) == std::vector<double>{1, 1, 1});

  auto z = Tensor<double>({2}, {1, 2}, true);
  auto loss = sum(mul(z, z));
  backward(loss);
  CHECK(z.grad()[0] == 2.0);
  CHECK(z.grad()[1] == 4.0);
  backward(loss);
  CHECK(z.grad()[0] == 4.0);
  CHECK(z.grad()[1] == 8.0);
}

TEST_CASE("backward requires a scalar loss") {
  auto x = Tensor<double>({3}, {1, 2, 3}, true);
  CHECK_THROWS_AS(backward(scale(x, 2.0)), UsageError);
}

TEST_CASE("tape lists parents before children and visits each node once") {
  auto x = Tensor<double>({2}, {0.3, -0.2}, true);
  auto a = tanh(x);
  auto b = mul(a, a);
  auto loss = sum(add(b, a));
  Tape<double> tape(loss);
  const auto& nodes = tape.nodes();
  for (std::size_t i = 0; i < nodes.size(); ++i) {
    for (const auto& p : nodes[i]->parents) {
      if (!p || !p->requires_grad) continue;
      auto it = std::find(nodes.begin(), nodes.end(), p.get());
      REQUIRE(it != nodes.end());
      CHECK(it - nodes.begin() < static_cast<long>(i));
    }
  }
  std::set<const Node<double>*> unique(nodes.begin(), nodes.end());
  CHECK(unique.size() == nodes.size());
  CHECK(nodes.back() == loss.node().get());
}

TEST_CASE("finite-difference checks for every primitive") {
  SUBCASE("elementwise and broadcast") {
    auto a = random_tensor({3, 4}, 21);
    auto b = random_tensor({4}, 22);
    expect_grad_ok([&] { return probe(add(a, b)); }, a);
    expect_grad_ok([&] { return probe(add(a, b)); }, b);
    expect_grad_ok([&] { return probe(sub(a, b)); }, b);
    expect_grad_ok([&] { return probe(mul(a, b)); }, a);
    expect_grad_ok([&] { return probe(mul(a, b)); }, b);
    expect_grad_ok([&] { return probe(scale(a, 0.7)); }, a);
    auto m = random_tensor({3, 2, 2}, 23);
    auto cb = random_tensor({3}, 24);
    expect_grad_ok([&] { return probe(add_channel(m, cb)); }, cb);
  }
  SUBCASE("matmul, batched and broadcast") {
    auto a = random_tensor({2, 3, 4}, 31);
    auto b = random_tensor({2, 4, 5}, 32);
    auto w = random_tensor({4, 5}, 33);
    expect_grad_ok([&] { return probe(matmul(a, b)); }, a);
    expect_grad_ok([&] { return probe(matmul(a, b)); }, b);
    expect_grad_ok([&] { return probe(matmul(a, w)); }, w);
  }
  SUBCASE("shape ops") {
    auto a = random_tensor({2, 3, 4}, 41);
    auto b = random_tensor({2, 2, 4}, 42);
    expect_grad_ok([&] { return probe(transpose(a)); }, a);
    expect_grad_ok([&] { return probe(reshape(a, {6, 4})); }, a);
    expect_grad_ok([&] { return probe(slice(a, 1, 1, 3)); }, a);
    expect_grad_ok([&] { return probe(concat<double>({a, b}, 1)); }, b);
    expect_grad_ok([&] { return probe(to_tokens(a)); }, a);
  }
  SUBCASE("nonlinearities and reductions") {
    auto a = random_tensor({3, 5}, 51, -2, 2);
    expect_grad_ok([&] { return probe(softmax(a, 1)); }, a);
    expect_grad_ok([&] { return probe(softmax(a, 0)); }, a);
    expect_grad_ok([&] { return probe(tanh(a)); }, a);
    // keep clear of the kink at zero
    auto pos = random_tensor({3, 5}, 52, 0.1, 1.0);
    auto neg = random_tensor({3, 5}, 53, -1.0, -0.1);
    expect_grad_ok([&] { return probe(relu(pos)); }, pos);
    expect_grad_ok([&] { return probe(relu(neg)); }, neg);
    expect_grad_ok([&] { return mean(mul(a, a)); }, a);
  }
  SUBCASE("bilinear sampling through features and coordinates") {
    auto f = random_tensor({3, 5, 7}, 61);
    std::vector<double> p;
    std::mt19937 rng(62);
    std::uniform_int_distribution<int> cell(0, 3);
    std::uniform_real_distribution<double> frac(0.05, 0.95);
    for (int i = 0; i < 20; ++i) {
      p.push_back(cell(rng) + frac(rng));
      p.push_back(cell(rng) + 1 + frac(rng));
    }
    auto pts = Tensor<double>({20, 2}, p, true);
    expect_grad_ok([&] { return probe(bilinear_sample(f, pts)); }, f);
    expect_grad_ok([&] { return probe(bilinear_sample(f, pts)); }, pts);
  }
  SUBCASE("convolution, normalization, resampling") {
    auto x = random_tensor({2, 6, 6}, 71);
    auto w = random_tensor({3, 2, 3, 3}, 72);
    auto b = random_tensor({3}, 73);
    for (int stride : {1, 2}) {
      expect_grad_ok([&] { return probe(conv2d(x, w, b, stride, 1)); }, x);
      expect_grad_ok([&] { return probe(conv2d(x, w, b, stride, 1)); }, w);
      expect_grad_ok([&] { return probe(conv2d(x, w, b, stride, 1)); }, b);
    }
    auto g = random_tensor({4, 3, 3}, 74);
    auto gamma = random_tensor({4}, 75, 0.5, 1.5);
    auto beta = random_tensor({4}, 76);
    expect_grad_ok([&] { return probe(group_norm(g, gamma, beta, 2)); }, g);
    expect_grad_ok([&] { return probe(group_norm(g, gamma, beta, 2)); }, gamma);
    expect_grad_ok([&] { return probe(group_norm(g, gamma, beta, 2)); }, beta);
    expect_grad_ok([&] { return probe(upsample_bilinear(g, 2)); }, g);
    expect_grad_ok([&] { return probe(upsample_bilinear(g, 8)); }, g);
    auto q = random_tensor({2, 4, 6}, 77);
    expect_grad_ok([&] { return probe(avg_pool(q, 2)); }, q);
    expect_grad_ok([&] { return probe(pad_to(q, 5, 8)); }, q);
    expect_grad_ok([&] { return probe(crop_to(q, 3, 3)); }, q);
  }
  SUBCASE("cross entropy") {
    auto logits = random_tensor({4, 3, 3}, 81, -2, 2);
    std::vector<int> labels{0, 1, 2, 3, 3, 2, 1, 0, 2};
    expect_grad_ok([&] { return cross_entropy(logits, std::span<const int>(labels)); }, logits);
  }
  SUBCASE("composite") {
    auto x = random_tensor({4, 3}, 91);
    auto w = random_tensor({3, 3}, 92);
    auto f = random_tensor({3, 4, 4}, 93);
    auto pts_base = random_tensor({4, 2}, 94, 0.2, 2.6, false);
    auto fn = [&] {
      auto off = tanh(matmul(x, w));
      auto pts = add(pts_base, slice(off, 1, 0, 2));
      auto s = bilinear_sample(f, pts);
      return probe(softmax(matmul(s, transpose(x)), 1));
    };
    expect_grad_ok(fn, x);
    expect_grad_ok(fn, w);
    expect_grad_ok(fn, f);
  }
}

TEST_CASE("upsampling a constant map stays constant") {
  auto c = Tensor<float>::full({2, 3, 4}, 1.75f);
  auto u = upsample_bilinear(c, 8);
  CHECK(u.shape() == Shape{2, 24, 32});
  for (float v : u.data()) CHECK(v == 1.75f);
}

TEST_CASE("forward is replayable bit-identically") {
  auto f = random_tensor<float>({4, 6, 6}, 5);
  auto w = random_tensor<float>({4, 4, 3, 3}, 6);
  auto run = [&] { return softmax(to_tokens(conv2d(f, w, Tensor<float>(), 1, 1)), 1); };
  auto a = run();
  auto b = run();
  CHECK(std::equal(a.data().begin(), a.data().end(), b.data().begin()));
}

TEST_CASE("independent graphs on separate threads") {
  std::vector<double> grads(4, 0.0);
  std::vector<std::thread> pool;
  for (int t = 0; t < 4; ++t) {
    pool.emplace_back([t, &grads] {
      auto x = Tensor<double>({2}, {double(t), 1.0}, true);
      backward(sum(mul(x, x)));
      grads[t] = x.grad()[0];
    });
  }
  for (auto& th : pool) th.join();
  for (int t = 0; t < 4; ++t) CHECK(grads[t] == 2.0 * t);
}

TEST_CASE("no-grad mode records nothing") {
  auto x = Tensor<double>({2}, {1, 2}, true);
  NoGradGuard guard;
  auto y = sum(x);
  CHECK_FALSE(y.requires_grad());
}
