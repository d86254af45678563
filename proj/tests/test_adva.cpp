#include "doctest.h"

#include <cmath>
#include <cstring>
#include <random>

#include "devos/adva.hpp"
#include "devos/flow.hpp"
#include "devos/gradcheck.hpp"

#include "adva_oracle.hpp"

using namespace devos;
using namespace devos::oracle;

TEST_CASE("config validation") {
  AdvaConfig cfg;
  cfg.embed_dim = 10;
  cfg.heads = 4;
  CHECK_THROWS_AS(cfg.validate(), InputError);
  cfg.embed_dim = 8;
  cfg.points = 0;
  CHECK_THROWS_AS(cfg.validate(), InputError);
  cfg.points = 4;
  cfg.validate();
  CHECK(cfg.sigma(0) == 4.0);
  CHECK(cfg.sigma(1) == 8.0);
  CHECK(cfg.sigma(2) == 16.0);
}

TEST_CASE("reference points map cell centers across scales") {
  auto [y, x] = reference_point(0, 0, {8, 8}, {4, 4});
  CHECK(y == doctest::Approx(-0.25));
  CHECK(x == doctest::Approx(-0.25));
  auto [y2, x2] = reference_point(3, 5, {4, 6}, {4, 6});
  CHECK(y2 == 3.0);
  CHECK(x2 == 5.0);
}

TEST_CASE("semantic offsets match a linear+tanh+scale oracle and stay in the window") {
  std::mt19937_64 rng(3);
  Initializer init(1);
  AdvaConfig cfg{8, 2, 3, 4.0, true};
  DeformableAttention<double> m(init, cfg, AttentionMode::Self);
  ParamList<double> ps;
  m.semantic_head().collect("s", ps);
  randomize(ps, rng, 2.0);
  Tensor<double> q = random_tensor({5, 8}, rng, 3.0);
  for (int level = 0; level < kNumLevels; ++level) {
    auto off = m.semantic_offsets(q, level);
    CHECK(off.shape() == Shape{5, 2, 3, 3, 2});
    const auto raw = dense(m.semantic_head());
    for (int p = 0; p < 5; ++p) {
      const Vec r = raw(Vec(q.data().begin() + p * 8, q.data().begin() + (p + 1) * 8));
      for (int k = 0; k < cfg.offset_columns(); ++k) {
        const double expect = cfg.sigma(level) * std::tanh(r[k]);
        const double got = off[static_cast<long>(p) * cfg.offset_columns() + k];
        CHECK(std::abs(got - expect) <= 1e-6);
        CHECK(std::abs(got) < cfg.sigma(level));
      }
    }
  }
  m.semantic_head().zero();
  const auto zeroed = m.semantic_offsets(q, 0);
  for (double v : zeroed.data()) CHECK(v == 0.0);
}

TEST_CASE("semantic offsets saturate strictly inside the window in float") {
  Initializer init(1);
  DeformableAttention<float> m(init, AdvaConfig{4, 1, 1, 4.0, true}, AttentionMode::Self);
  auto b = m.semantic_head().bias().mutable_data();
  for (auto& v : b) v = 1e4f;
  auto off = m.semantic_offsets(Tensor<float>::full({1, 4}, 1.0f), 2);
  for (float v : off.data()) CHECK(std::abs(v) < 16.0f);
}

TEST_CASE("flow offsets: zero flow, passthrough fixture and bounds") {
  Initializer init(2);
  AdvaConfig cfg{4, 2, 2, 4.0, true};
  DeformableAttention<double> m(init, cfg, AttentionMode::Cross);
  const int h = 10, w = 20, cols = cfg.offset_columns();

  Tensor<double> zero_flow = Tensor<double>::zeros({2, h, w});
  const auto passthrough = m.flow_offsets(zero_flow, Tensor<double>());
  for (double v : passthrough.data()) CHECK(v == 0.0);
  m.flow_head().zero();
  const auto zeroed = m.flow_offsets(zero_flow, Tensor<double>());
  for (double v : zeroed.data()) CHECK(v == 0.0);

  // Raw output set to atanh(d / D) in closed form for a constant translation.
  for (double dy : {-2.0, 0.5, 2.0}) {
    for (double dx : {-4.0, 1.0, 3.5}) {
      const double ny = dy / h, nx = dx / w;
      m.flow_head().zero();
      auto wt = m.flow_head().weight().mutable_data();
      for (int col = 0; col < cols; ++col) {
        const double n = col % 2 == 0 ? ny : nx;
        wt[static_cast<std::size_t>(col % 2) * cols + col] = std::atanh(n) / n;
      }
      std::vector<double> f(2 * h * w);
      std::fill(f.begin(), f.begin() + h * w, dy);
      std::fill(f.begin() + h * w, f.end(), dx);
      auto off = m.flow_offsets(Tensor<double>({2, h, w}, f), Tensor<double>());
      for (long i = 0; i < off.size(); ++i) {
        const double expect = i % 2 == 0 ? dy : dx;
        CHECK(std::abs(off[i] - expect) <= 0.01 * std::abs(expect));
      }
    }
  }

  std::mt19937_64 rng(8);
  ParamList<double> ps;
  m.flow_head().collect("f", ps);
  randomize(ps, rng, 50.0);
  auto off = m.flow_offsets(random_tensor({2, h, w}, rng, 100.0), random_tensor({4, h, w}, rng, 10.0));
  for (long i = 0; i < off.size(); ++i) CHECK(std::abs(off[i]) < (i % 2 == 0 ? h : w));
  CHECK_THROWS_AS(m.flow_offsets(zero_flow, Tensor<double>::zeros({4, h, w + 1})), InputError);
}

TEST_CASE("default flow head approximately passes the flow through") {
  Initializer init(2);
  DeformableAttention<double> m(init, AdvaConfig{4, 1, 1, 4.0, true}, AttentionMode::Cross);
  std::vector<double> f(2 * 16 * 16);
  std::fill(f.begin(), f.begin() + 256, 1.0);
  std::fill(f.begin() + 256, f.end(), -2.0);
  auto off = m.flow_offsets(Tensor<double>({2, 16, 16}, f), Tensor<double>());
  CHECK(off[0] == doctest::Approx(16 * std::tanh(1.0 / 16)));
  CHECK(off[1] == doctest::Approx(-16 * std::tanh(2.0 / 16)));
}

TEST_CASE("QK-flow enrichment: zero init identity, additivity, projection oracle") {
  std::mt19937_64 rng(4);
  Initializer init(3);
  DeformableAttention<double> m(init, AdvaConfig{6, 2, 1, 4.0, true}, AttentionMode::Cross);
  Tensor<double> q = random_tensor({7, 6}, rng), k = random_tensor({9, 6}, rng);
  Tensor<double> f1 = random_tensor({7, 2}, rng), f2 = random_tensor({7, 2}, rng), g = random_tensor({9, 2}, rng);

  auto [q0, k0] = m.qk_flow_enrich(q, k, f1, g);
  for (long i = 0; i < q.size(); ++i) CHECK(q0[i] == q[i]);
  for (long i = 0; i < k.size(); ++i) CHECK(k0[i] == k[i]);

  ParamList<double> ps;
  m.qk_inverse().collect("i", ps);
  m.qk_direct().collect("d", ps);
  randomize(ps, rng, 1.0);
  auto [qa, ka] = m.qk_flow_enrich(q, k, f1, g);
  auto [qb, kb] = m.qk_flow_enrich(q, k, f2, g);
  auto [qab, kab] = m.qk_flow_enrich(q, k, add(f1, f2), g);
  for (long i = 0; i < q.size(); ++i) {
    CHECK(qab[i] - q[i] == doctest::Approx((qa[i] - q[i]) + (qb[i] - q[i])).epsilon(1e-12));
  }
  const auto& wi = m.qk_inverse().weight();
  for (int p = 0; p < 7; ++p) {
    for (int c = 0; c < 6; ++c) {
      const double ref = q[p * 6 + c] + f1[p * 2] * wi[c] + f1[p * 2 + 1] * wi[6 + c];
      CHECK(std::abs(qa[p * 6 + c] - ref) <= 1e-6);
    }
  }
  CHECK_THROWS_AS(m.qk_flow_enrich(q, k, g, g), InputError);
}

TEST_CASE("cross attention matches the brute-force gather oracle on random configs") {
  std::mt19937_64 rng(2024);
  std::uniform_int_distribution<int> side(1, 16);
  const int channels[] = {4, 8};
  const int head_counts[] = {1, 2, 4};
  double worst = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const int c = channels[trial % 2];
    const int heads = head_counts[(trial / 2) % 3];
    const int nk = 1 + trial % 3;
    AdvaConfig cfg{c, heads, nk, 1.0 + trial % 4, trial % 7 != 0};
    Initializer init(trial);
    DeformableAttention<double> m(init, cfg, AttentionMode::Cross);
    ParamList<double> ps;
    m.collect("a", ps);
    randomize(ps, rng, 0.4);
    const auto sizes = pyramid_sizes(side(rng), side(rng));
    Scene s = random_scene(c, sizes, rng, 1.5, trial % 3 != 0);
    AdvaGates gates{trial % 5 != 1, trial % 5 != 2, trial % 5 != 3};
    auto got = m.cross(s.query, s.prev, s.mask, s.flow, gates);
    auto expect = brute_force(m, s.query, s.prev, &s.mask, &s.flow, gates);
    worst = std::max(worst, max_diff(got, expect));
  }
  CHECK(worst <= 1e-5);
}

TEST_CASE("self attention matches the brute-force gather oracle") {
  std::mt19937_64 rng(77);
  std::uniform_int_distribution<int> side(1, 16);
  double worst = 0;
  for (int trial = 0; trial < 30; ++trial) {
    AdvaConfig cfg{8, 1 + trial % 2, 1 + trial % 4, 2.0, true};
    Initializer init(trial);
    DeformableAttention<double> m(init, cfg, AttentionMode::Self);
    ParamList<double> ps;
    m.collect("a", ps);
    randomize(ps, rng, 0.4);
    Scene s = random_scene(8, pyramid_sizes(side(rng), side(rng)), rng);
    const bool multi = trial % 3 != 0;
    auto got = m.self(s.query, multi);
    CHECK(got.levels[0].shape() == s.query.levels[0].shape());
    CHECK(got.levels[2].shape() == s.query.levels[2].shape());
    auto expect = brute_force(m, s.query, s.query, nullptr, nullptr, AdvaGates{false, false, multi});
    worst = std::max(worst, max_diff(got, expect));
  }
  CHECK(worst <= 1e-5);
}

TEST_CASE("weights sum to one and points decompose into reference + flow + semantic") {
  std::mt19937_64 rng(5);
  Initializer init(5);
  AdvaConfig cfg{8, 2, 3, 4.0, true};
  DeformableAttention<double> m(init, cfg, AttentionMode::Cross);
  ParamList<double> ps;
  m.collect("a", ps);
  randomize(ps, rng, 0.3);
  const auto sizes = pyramid_sizes(8, 12);
  Scene s = random_scene(8, sizes, rng);
  AttentionTrace<double> trace;
  m.cross(s.query, s.prev, s.mask, s.flow, {}, &trace);
  for (int l = 0; l < kNumLevels; ++l) {
    const auto& lv = trace.levels[l];
    const int h = sizes[l].first, w = sizes[l].second, p = h * w;
    CHECK(lv.scales.size() == 3u);
    for (const auto& wts : lv.weights) {
      CHECK(wts.shape() == Shape{p, 1, 3 * cfg.points});
      for (int q = 0; q < p; ++q) {
        double total = 0;
        for (int k = 0; k < 3 * cfg.points; ++k) total += wts[static_cast<long>(q) * 3 * cfg.points + k];
        CHECK(std::abs(total - 1.0) <= 1e-6);
      }
    }
    for (int hd = 0; hd < cfg.heads; ++hd) {
      for (int slot = 0; slot < 3; ++slot) {
        const int sc = lv.scales[slot];
        const double ry = double(sizes[sc].first) / h, rx = double(sizes[sc].second) / w;
        const auto& pts = lv.points[hd][slot];
        for (int i = 0; i < h; ++i) {
          for (int j = 0; j < w; ++j) {
            const auto [y0, x0] = reference_point(i, j, sizes[l], sizes[sc]);
            for (int k = 0; k < cfg.points; ++k) {
              const long off = ((((static_cast<long>(i) * w + j) * cfg.heads + hd) * 3 + sc) * cfg.points + k) * 2;
              const long row = (static_cast<long>(i) * w + j) * cfg.points + k;
              CHECK(pts[row * 2] == doctest::Approx(y0 + (lv.semantic[off] + lv.flow[off]) * ry).epsilon(1e-12));
              CHECK(pts[row * 2 + 1] ==
                    doctest::Approx(x0 + (lv.semantic[off + 1] + lv.flow[off + 1]) * rx).epsilon(1e-12));
            }
          }
        }
      }
    }
  }
}

TEST_CASE("zero flow with a zero flow head is bit-identical to the flow branch disabled") {
  std::mt19937_64 rng(6);
  Initializer init(6);
  DeformableAttention<float> m(init, AdvaConfig{8, 2, 2, 4.0, true}, AttentionMode::Cross);
  m.flow_head().zero();
  FeaturePyramid<float> q, prev, mask;
  FlowInputs<float> flow;
  std::normal_distribution<float> n(0, 1);
  auto rnd = [&](Shape sh) {
    std::vector<float> v(static_cast<std::size_t>(numel(sh)));
    for (auto& x : v) x = n(rng);
    return Tensor<float>(sh, v);
  };
  const auto sizes = pyramid_sizes(8, 8);
  for (int l = 0; l < kNumLevels; ++l) {
    const auto [h, w] = sizes[l];
    q.levels[l] = rnd({8, h, w});
    prev.levels[l] = rnd({8, h, w});
    mask.levels[l] = rnd({8, h, w});
    flow.inverse[l] = Tensor<float>::zeros({2, h, w});
    flow.direct[l] = Tensor<float>::zeros({2, h, w});
  }
  auto on = m.cross(q, prev, mask, flow, AdvaGates{true, true, true});
  auto off = m.cross(q, prev, mask, flow, AdvaGates{false, true, true});
  for (int l = 0; l < kNumLevels; ++l) {
    CHECK(std::memcmp(on.levels[l].data().data(), off.levels[l].data().data(), on.levels[l].size() * 4) == 0);
  }
}

TEST_CASE("identity scene: each query samples its own location at every scale") {
  std::mt19937_64 rng(7);
  Initializer init(7);
  DeformableAttention<double> m(init, AdvaConfig{4, 1, 1, 4.0, true}, AttentionMode::Cross);
  m.semantic_head().zero();
  m.flow_head().zero();
  const auto sizes = pyramid_sizes(8, 8);
  Scene s = random_scene(4, sizes, rng, 0.0);
  s.prev = s.query;
  AttentionTrace<double> trace;
  m.cross(s.query, s.prev, s.mask, s.flow, {}, &trace);
  for (int l = 0; l < kNumLevels; ++l) {
    const auto [h, w] = sizes[l];
    for (int slot = 0; slot < 3; ++slot) {
      const auto& pts = trace.levels[l].points[0][slot];
      const int sc = trace.levels[l].scales[slot];
      for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) {
          const auto [y, x] = reference_point(i, j, sizes[l], sizes[sc]);
          CHECK(pts[(i * w + j) * 2] == doctest::Approx(y));
          CHECK(pts[(i * w + j) * 2 + 1] == doctest::Approx(x));
        }
      }
    }
  }
}

TEST_CASE("pure translation: flow-guided samples recover the current features") {
  std::mt19937_64 rng(8);
  Initializer init(8);
  const int c = 4, h = 16, w = 16;
  DeformableAttention<double> m(init, AdvaConfig{c, 1, 1, 4.0, true}, AttentionMode::Cross);
  m.semantic_head().zero();

  // Content moves 8 input pixels right: one level-0 pixel.
  auto [dir, inv] = synth_flow(Transform::translation(8, 0), 128, 128);
  auto inv_levels = flow_levels<double>(inv, 128, 128);
  auto dir_levels = flow_levels<double>(dir, 128, 128);

  // Identity-passthrough fixture: raw = atanh(F / D).
  const int cols = m.config().offset_columns();
  m.flow_head().zero();
  auto wt = m.flow_head().weight().mutable_data();
  const double nx = -1.0 / w;
  for (int col = 1; col < cols; col += 2) wt[static_cast<std::size_t>(cols) + col] = std::atanh(nx) / nx;

  Tensor<double> prev = random_tensor({c, h, w}, rng);
  std::vector<double> cur(static_cast<std::size_t>(c) * h * w);
  for (int k = 0; k < c; ++k) {
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) cur[(k * h + i) * w + j] = prev[(k * h + i) * w + std::max(j - 1, 0)];
    }
  }
  Scene s = random_scene(c, pyramid_sizes(h, w), rng);
  s.prev.levels[0] = prev;
  s.query.levels[0] = Tensor<double>({c, h, w}, cur);
  for (int l = 0; l < kNumLevels; ++l) {
    s.flow.inverse[l] = inv_levels[l];
    s.flow.direct[l] = dir_levels[l];
    s.flow.inverse_embedding.levels[l] = Tensor<double>();
  }
  AttentionTrace<double> trace;
  m.cross(s.query, s.prev, s.mask, s.flow, AdvaGates{true, true, false}, &trace);
  auto sampled = bilinear_sample(prev, trace.levels[0].points[0][0]);
  double worst = 0;
  for (int i = 0; i < h; ++i) {
    for (int j = 1; j < w; ++j) {
      for (int k = 0; k < c; ++k) worst = std::max(worst, std::abs(sampled[(i * w + j) * c + k] - cur[(k * h + i) * w + j]));
    }
  }
  CHECK(worst <= 1e-5);
}

TEST_CASE("self attention with zero offsets, one point and one scale is a value projection") {
  std::mt19937_64 rng(9);
  Initializer init(9);
  DeformableAttention<double> m(init, AdvaConfig{4, 2, 1, 4.0, true}, AttentionMode::Self);
  m.semantic_head().zero();
  for (int l = 0; l < kNumLevels; ++l) m.ffn_out(l).zero();
  Scene s = random_scene(4, pyramid_sizes(6, 5), rng);
  auto out = m.self(s.query, false);
  for (int l = 0; l < kNumLevels; ++l) {
    const int h = s.query.height(l), w = s.query.width(l);
    for (int i = 0; i < h; ++i) {
      for (int j = 0; j < w; ++j) {
        const Vec x = pixel(s.query.levels[l], i, j);
        const Vec y = plus(x, dense(m.out_proj())(dense(m.value_proj())(x)));
        for (int k = 0; k < 4; ++k) CHECK(out.levels[l][(k * h + i) * w + j] == doctest::Approx(y[k]).epsilon(1e-10));
      }
    }
  }
}

TEST_CASE("cross attention without a previous frame is a usage error") {
  Initializer init(1);
  DeformableAttention<double> m(init, AdvaConfig{4, 1, 1, 4.0, true}, AttentionMode::Cross);
  std::mt19937_64 rng(1);
  Scene s = random_scene(4, pyramid_sizes(4, 4), rng);
  FeaturePyramid<double> empty;
  CHECK_THROWS_AS(m.cross(s.query, empty, s.mask, s.flow), UsageError);
  s.flow.inverse[0] = Tensor<double>::zeros({2, 3, 4});
  CHECK_THROWS_AS(m.cross(s.query, s.prev, s.mask, s.flow), InputError);
}

TEST_CASE("gradients reach queries, previous features, masks, flow and offset heads") {
  std::mt19937_64 rng(10);
  Initializer init(10);
  AdvaConfig cfg{4, 2, 2, 1.5, true};
  DeformableAttention<double> m(init, cfg, AttentionMode::Cross);
  ParamList<double> ps;
  m.collect("a", ps);
  randomize(ps, rng, 0.3);
  const auto sizes = pyramid_sizes(5, 6);
  Scene s = random_scene(4, sizes, rng, 0.7);
  std::array<Tensor<double>, kNumLevels> probe;
  for (int l = 0; l < kNumLevels; ++l) probe[l] = random_tensor({4, sizes[l].first, sizes[l].second}, rng).detach();
  auto loss = [&] {
    auto out = m.cross(s.query, s.prev, s.mask, s.flow);
    Tensor<double> total = sum(mul(out.levels[0], probe[0]));
    for (int l = 1; l < kNumLevels; ++l) total = add(total, sum(mul(out.levels[l], probe[l])));
    return total;
  };
  auto check = [&](const char* what, Tensor<double> t) {
    auto r = check_gradient<double>(loss, t, 1e-5, 60, 1);
    INFO(what << " worst " << r.max_rel_error << " at " << r.worst_index << " analytic " << r.worst_analytic
              << " numeric " << r.worst_numeric);
    CHECK(r.max_rel_error <= 1e-3);
  };
  check("query", s.query.levels[0]);
  check("previous", s.prev.levels[1]);
  check("mask", s.mask.levels[0]);
  check("inverse flow", s.flow.inverse[0]);
  check("direct flow", s.flow.direct[2]);
  check("flow embedding", s.flow.inverse_embedding.levels[1]);
  check("semantic head", m.semantic_head().weight());
  check("flow head", m.flow_head().weight());
  check("qk inverse", m.qk_inverse().weight());
}
