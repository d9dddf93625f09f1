#include <doctest.h>

#include <cmath>

#include "oscount/density.hpp"
#include "oscount/grad_check.hpp"
#include "oscount/reference.hpp"
#include "test_util.hpp"

using namespace oscount;
using testutil::rand_tensor;

TEST_CASE("regress_density: zero features and zero biases give a zero map") {
  Rng rng(1);
  auto params = RegressorParams<double>::init(8, rng);
  for (auto* b : {&params.c1.bias, &params.c2.bias, &params.c3.bias})
    std::fill(b->data().begin(), b->data().end(), 0.0);
  FeatureSequence<double> seq{Tensor<double>::zeros({16, 8}), {}, 0};
  auto dm = regress_density(seq, 4, 4, params, 0.25);
  CHECK(dm.values.shape() == Shape{8, 8});
  for (auto v : dm.values.data()) CHECK(v == 0.0);
  CHECK(dm.count() == 0.0);
}

TEST_CASE("regress_density: 8x8 tokens upsample to a 16x16 map") {
  Rng rng(2);
  auto params = RegressorParams<float>::init(8, rng);
  FeatureSequence<float> seq{rand_tensor<float>({64, 8}, rng), {}, 0};
  auto dm = regress_density(seq, 8, 8, params, 0.25);
  CHECK(dm.values.shape() == Shape{16, 16});
}

TEST_CASE("regress_density: output is non-negative for random inputs") {
  Rng rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    auto params = RegressorParams<float>::init(8, rng);
    FeatureSequence<float> seq{rand_tensor<float>({16, 8}, rng, -2.0, 2.0), {}, 0};
    auto dm = regress_density(seq, 4, 4, params, 0.25);
    for (auto v : dm.values.data()) CHECK(v >= 0.0f);
  }
}

TEST_CASE("regress_density: token/grid mismatch throws") {
  Rng rng(4);
  auto params = RegressorParams<float>::init(8, rng);
  FeatureSequence<float> seq{rand_tensor<float>({15, 8}, rng), {}, 0};
  CHECK_THROWS_AS(regress_density(seq, 4, 4, params, 0.25), std::invalid_argument);
}

TEST_CASE("gt_density: empty list gives a zero map") {
  auto dm = gt_density_from_points<double>({}, 16, 16, 0.25, 2.0);
  for (auto v : dm.values.data()) CHECK(v == 0.0);
}

TEST_CASE("gt_density: mass equals the point count, borders included") {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    const int k = static_cast<int>(rng.uniform_int(1, 12));
    std::vector<std::array<double, 2>> pts;
    for (int i = 0; i < k; ++i) {
      if (rng.bernoulli(0.25)) {
        // Push the point onto an image border.
        pts.push_back({rng.bernoulli(0.5) ? 0.0 : 63.999, rng.uniform(0.0, 63.999)});
      } else {
        pts.push_back({rng.uniform(0.0, 63.999), rng.uniform(0.0, 63.999)});
      }
    }
    auto dm = gt_density_from_points<double>(pts, 16, 16, 0.25, 2.0);
    double mass = 0.0;
    for (auto v : dm.values.data()) mass += v;
    CHECK(std::abs(mass - k) < 1e-6);
  }
}

TEST_CASE("gt_density: single centered point is 4-fold symmetric with argmax at its cell") {
  // Image pixel (29.5, 29.5) maps to the exact grid-cell center (7, 7).
  auto dm = gt_density_from_points<double>({{29.5, 29.5}}, 16, 16, 0.25, 2.0);
  const auto& v = dm.values;
  int argmax = 0;
  for (int i = 1; i < v.size(); ++i)
    if (v.data()[i] > v.data()[argmax]) argmax = i;
  CHECK(argmax == 7 * 16 + 7);
  for (int dy = -4; dy <= 4; ++dy)
    for (int dx = -4; dx <= 4; ++dx) {
      const double a = v.data()[(7 + dy) * 16 + (7 + dx)];
      const double b = v.data()[(7 - dx) * 16 + (7 + dy)];  // 90-degree rotation
      CHECK(a == doctest::Approx(b).epsilon(1e-12));
    }
}

TEST_CASE("gt_density: out-of-bounds point is rejected with the sample id") {
  CHECK_THROWS_WITH_AS(gt_density_from_points<double>({{70.0, 5.0}}, 16, 16, 0.25, 2.0, "sample_7"),
                       doctest::Contains("sample_7"), std::invalid_argument);
}

TEST_CASE("euclidean_loss: zero at equality, closed form for a constant offset") {
  Rng rng(6);
  auto x = rand_tensor<double>({5, 5}, rng);
  DensityMap<double> a{x, 1.0}, b{x.clone_detached(), 1.0};
  CHECK(euclidean_loss(a, b).item() == 0.0);
  auto shifted = add_scalar(x, 0.3);
  DensityMap<double> c{shifted, 1.0};
  CHECK(euclidean_loss(c, a).item() == doctest::Approx(25 * 0.09).epsilon(1e-9));
}

TEST_CASE("euclidean_loss: matches the elementwise loop oracle") {
  Rng rng(7);
  auto x = rand_tensor<double>({6, 4}, rng);
  auto y = rand_tensor<double>({6, 4}, rng);
  double expect = 0.0;
  for (int i = 0; i < x.size(); ++i) {
    const double d = x.data()[i] - y.data()[i];
    expect += d * d;
  }
  CHECK(euclidean_loss<double>({x, 1.0}, {y, 1.0}).item() == doctest::Approx(expect).epsilon(1e-12));
  CHECK_THROWS_AS(euclidean_loss<double>({x, 1.0}, {rand_tensor<double>({4, 6}, rng), 1.0}),
                  std::invalid_argument);
}

TEST_CASE("ssim_loss: self-similarity is zero and the loss is bounded") {
  Rng rng(8);
  LossConfig cfg;
  auto x = rand_tensor<double>({16, 16}, rng, 0.0, 1.0);
  CHECK(ssim_loss<double>({x, 1.0}, {x.clone_detached(), 1.0}, cfg).item() < 1e-6);
  for (int trial = 0; trial < 10; ++trial) {
    auto a = rand_tensor<double>({16, 16}, rng, 0.0, 2.0);
    auto b = rand_tensor<double>({16, 16}, rng, 0.0, 2.0);
    const double loss = ssim_loss<double>({a, 1.0}, {b, 1.0}, cfg).item();
    CHECK(loss >= 0.0);
    CHECK(loss <= 2.0);
  }
}

TEST_CASE("ssim_loss: constant maps match the closed-form luminance penalty") {
  LossConfig cfg;
  // After joint-max normalization the maps are a=0.5 and b=1.0 everywhere.
  auto x = Tensor<double>::full({16, 16}, 0.4);
  auto y = Tensor<double>::full({16, 16}, 0.8);
  const double expect = 1.0 - reference::ssim_of_constants(0.5, 1.0, cfg.ssim_c1);
  CHECK(ssim_loss<double>({x, 1.0}, {y, 1.0}, cfg).item() == doctest::Approx(expect).epsilon(1e-9));
}

TEST_CASE("ssim_loss: map smaller than the window is a configuration error") {
  LossConfig cfg;
  auto x = Tensor<double>::full({8, 8}, 0.1);
  CHECK_THROWS_AS(ssim_loss<double>({x, 1.0}, {x, 1.0}, cfg), std::invalid_argument);
}

TEST_CASE("total_loss: lambda=0 equals the Euclidean term alone") {
  Rng rng(9);
  auto a = rand_tensor<double>({16, 16}, rng, 0.0, 1.0);
  auto b = rand_tensor<double>({16, 16}, rng, 0.0, 1.0);
  LossConfig cfg;
  cfg.lambda = 0.0;
  CHECK(total_loss<double>({a, 1.0}, {b, 1.0}, cfg).item() ==
        euclidean_loss<double>({a, 1.0}, {b, 1.0}).item());
  LossConfig def;
  CHECK(def.lambda == 1e-4);
  const double with_ssim = total_loss<double>({a, 1.0}, {b, 1.0}, def).item();
  const double expect = euclidean_loss<double>({a, 1.0}, {b, 1.0}).item() +
                        def.lambda * ssim_loss<double>({a, 1.0}, {b, 1.0}, def).item();
  CHECK(with_ssim == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("total_loss: gradient wrt the prediction passes finite differences") {
  Rng rng(10);
  LossConfig cfg;
  auto gt_vals = rand_tensor<double>({12, 12}, rng, 0.0, 1.0);
  cfg.ssim_window = 7;
  auto err = grad_check<double>(
      [&](const Tensor<double>& pred) {
        return total_loss<double>({pred, 1.0}, {gt_vals, 1.0}, cfg);
      },
      rand_tensor<double>({12, 12}, rng, 0.1, 1.0), 1e-5);
  CHECK(err < 1e-3);
}

TEST_CASE("total_loss: non-negative, zero only at equality") {
  Rng rng(11);
  LossConfig cfg;
  auto x = rand_tensor<double>({16, 16}, rng, 0.0, 1.0);
  CHECK(total_loss<double>({x, 1.0}, {x.clone_detached(), 1.0}, cfg).item() >= 0.0);
  CHECK(total_loss<double>({x, 1.0}, {x.clone_detached(), 1.0}, cfg).item() < 1e-9);
  auto y = add_scalar(x, 0.05);
  CHECK(total_loss<double>({y, 1.0}, {x, 1.0}, cfg).item() > 0.0);
}
