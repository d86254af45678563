#include "doctest.h"

#include <random>
#include <set>

#include "devos/encoders.hpp"

using namespace devos;

namespace {

Image random_image(int h, int w, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Image img{h, w, std::vector<float>(static_cast<std::size_t>(3) * h * w)};
  for (auto& p : img.pixels) p = u(rng);
  return img;
}

ObjectMask random_mask(int h, int w, int max_label, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<int> u(0, max_label);
  std::vector<std::uint8_t> v(static_cast<std::size_t>(h) * w);
  for (auto& x : v) x = static_cast<std::uint8_t>(u(rng));
  return ObjectMask(h, w, std::move(v));
}

ConvStackConfig small_stack() { return ConvStackConfig{3, 4, {4, 6, 8, 8}}; }

}  // namespace

TEST_CASE("encoder levels have stride 8/16/32") {
  Initializer init(1);
  ImageEncoder<float> enc(init, small_stack(), 8, 64, 64, true);
  auto out = enc(random_image(64, 64, 3));
  CHECK(out.features.levels[0].shape() == Shape{8, 8, 8});
  CHECK(out.features.levels[1].shape() == Shape{8, 4, 4});
  CHECK(out.features.levels[2].shape() == Shape{8, 2, 2});

  auto wide = enc(random_image(96, 64, 4));
  CHECK(wide.features.levels[0].shape() == Shape{8, 12, 8});
  CHECK(wide.features.levels[1].shape() == Shape{8, 6, 4});
  CHECK(wide.features.levels[2].shape() == Shape{8, 3, 2});
  CHECK(wide.skip[0].shape() == Shape{6, 12, 8});
}

TEST_CASE("encoder rejects sizes that are not multiples of 32") {
  Initializer init(1);
  ImageEncoder<float> enc(init, small_stack(), 8, 64, 64, true);
  CHECK_THROWS_AS(enc(random_image(48, 64, 1)), InputError);
  CHECK_THROWS_AS(enc(random_image(16, 16, 1)), InputError);
  MaskEncoder<float> menc(init, ConvStackConfig{kMaxObjects, 4, {4, 6, 8, 8}}, 8);
  CHECK_THROWS_AS(menc(ObjectMask::background(40, 64)), InputError);
}

TEST_CASE("encoders are deterministic for a fixed seed") {
  Initializer a(7), b(7);
  ImageEncoder<float> ea(a, small_stack(), 8, 64, 64, true);
  ImageEncoder<float> eb(b, small_stack(), 8, 64, 64, true);
  const Image img = random_image(64, 64, 9);
  auto fa = ea(img), fb = eb(img);
  for (int l = 0; l < kNumLevels; ++l) {
    const auto x = fa.features.levels[l].data();
    const auto y = fb.features.levels[l].data();
    CHECK(std::equal(x.begin(), x.end(), y.begin()));
  }
}

TEST_CASE("all-background mask embeds to a spatially constant map") {
  Initializer init(2);
  MaskEncoder<double> menc(init, ConvStackConfig{kMaxObjects, 4, {4, 6, 8, 8}}, 8);
  auto emb = menc(ObjectMask::background(64, 64));
  // Zero input: every conv sees zeros, so only biases (zero-initialized) and
  // the zero bias of the projection contribute.
  for (int l = 0; l < kNumLevels; ++l) {
    const auto v = emb.levels[l].data();
    for (double x : v) CHECK(x == doctest::Approx(v[0]));
  }
}

TEST_CASE("onehot places label k in channel k-1") {
  ObjectMask m(2, 2, {0, 1, 15, 3});
  auto t = m.onehot<float>();
  CHECK(t.shape() == Shape{15, 2, 2});
  CHECK(t[0 * 4 + 1] == 1.0f);
  CHECK(t[14 * 4 + 2] == 1.0f);
  CHECK(t[2 * 4 + 3] == 1.0f);
  double total = 0;
  for (float v : t.data()) total += v;
  CHECK(total == 3.0);
  CHECK_THROWS_AS(ObjectMask(1, 1, {16}), InputError);
}

TEST_CASE("first mask layer is equivariant to label permutation") {
  Initializer init(3);
  ConvStack<double> stack(init, ConvStackConfig{kMaxObjects, 5, {4, 6, 8, 8}});
  const ObjectMask mask = random_mask(32, 32, 6, 11);
  const auto [shuffled, perm] = shuffle_channels(mask, 5);

  // Permuting the input channels of the stem weight the same way must give
  // the identical first-layer activation.
  Tensor<double> w = stack.stem().weight();
  const int cout = w.dim(0), k2 = w.dim(2) * w.dim(3);
  std::vector<double> pw(w.data().begin(), w.data().end());
  for (int o = 0; o < cout; ++o) {
    for (int lab = 1; lab < kNumClasses; ++lab) {
      for (int r = 0; r < k2; ++r) {
        pw[(static_cast<std::size_t>(o) * kMaxObjects + (perm[lab] - 1)) * k2 + r] =
            w[(static_cast<long>(o) * kMaxObjects + (lab - 1)) * k2 + r];
      }
    }
  }
  Tensor<double> permuted_w(w.shape(), pw);
  auto a = relu(conv2d(mask.onehot<double>(), w, stack.stem().bias(), 2, 1));
  auto b = relu(conv2d(shuffled.onehot<double>(), permuted_w, stack.stem().bias(), 2, 1));
  for (long i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
}

TEST_CASE("shuffle_channels examples") {
  ObjectMask single(1, 3, {0, 1, 1});
  auto [s1, p1] = shuffle_channels(single, 0);
  CHECK(p1[0] == 0);
  for (int i = 0; i < 3; ++i) CHECK((s1.at(0, i) == 0) == (single.at(0, i) == 0));

  ObjectMask two(1, 4, {1, 2, 0, 2});
  LabelPermutation swap = identity_permutation();
  std::swap(swap[1], swap[2]);
  auto swapped = apply_permutation(two, swap);
  CHECK(swapped.labels() == std::vector<std::uint8_t>{2, 1, 0, 1});
  CHECK(apply_permutation(swapped, invert(swap)) == two);
}

TEST_CASE("shuffle_channels property: bijective, background fixed, invertible") {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    const ObjectMask m = random_mask(6, 7, 15, seed + 100);
    const auto [s, perm] = shuffle_channels(m, seed);
    CHECK(perm[0] == 0);
    std::set<int> image(perm.begin(), perm.end());
    CHECK(image.size() == kNumClasses);
    CHECK(apply_permutation(s, invert(perm)) == m);
    CHECK(s.object_ids().size() == m.object_ids().size());
    for (int y = 0; y < 6; ++y) {
      for (int x = 0; x < 7; ++x) CHECK(s.at(y, x) == perm[m.at(y, x)]);
    }
  }
}

TEST_CASE("level projection matches a matmul oracle and is linear") {
  Initializer init(4);
  LevelProjection<double> proj(init, {3, 3, 3}, 5, 32, 32, false, false);
  std::mt19937_64 rng(1);
  std::normal_distribution<double> n(0, 1);
  std::vector<double> a(3 * 4 * 4), b(3 * 4 * 4);
  for (auto& x : a) x = n(rng);
  for (auto& x : b) x = n(rng);
  Tensor<double> ta({3, 4, 4}, a), tb({3, 4, 4}, b);

  auto out = proj.project(0, ta);
  const auto& w = proj.projection(0).weight();
  for (int c = 0; c < 5; ++c) {
    for (int p = 0; p < 16; ++p) {
      double ref = 0;
      for (int k = 0; k < 3; ++k) ref += a[k * 16 + p] * w[k * 5 + c];
      CHECK(out[c * 16 + p] == doctest::Approx(ref).epsilon(1e-12));
    }
  }
  auto zero = proj.project(0, Tensor<double>::zeros({3, 4, 4}));
  for (double v : zero.data()) CHECK(v == 0.0);
  auto sum = proj.project(0, add(ta, tb));
  auto sep = add(proj.project(0, ta), proj.project(0, tb));
  for (long i = 0; i < sum.size(); ++i) CHECK(sum[i] == doctest::Approx(sep[i]).epsilon(1e-12));
}

TEST_CASE("positional and scale embeddings add a fixed offset per level") {
  Initializer init(5);
  LevelProjection<double> proj(init, {3, 3, 3}, 4, 32, 32, true, true);
  std::vector<double> a(3 * 4 * 4, 0.3), b(3 * 4 * 4, -1.1);
  Tensor<double> ta({3, 4, 4}, a), tb({3, 4, 4}, b);
  // f(x) - f(y) is independent of the embeddings.
  auto diff = sub(proj.add_embeddings(0, proj.project(0, ta)), proj.add_embeddings(0, proj.project(0, tb)));
  auto plain = sub(proj.project(0, ta), proj.project(0, tb));
  for (long i = 0; i < diff.size(); ++i) CHECK(diff[i] == doctest::Approx(plain[i]).epsilon(1e-12));
  // Levels get different scale embeddings.
  CHECK(proj.scale_embedding(0)[0] != proj.scale_embedding(1)[0]);
}
