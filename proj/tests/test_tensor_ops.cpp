#include <doctest.h>

#ifdef _OPENMP
#include <omp.h>
#endif

#include <cmath>
#include <filesystem>

#include "oscount/adam.hpp"
#include "oscount/grad_check.hpp"
#include "oscount/ops.hpp"
#include "oscount/reference.hpp"
#include "oscount/rng.hpp"
#include "oscount/tensor_io.hpp"
#include "test_util.hpp"

using namespace oscount;
using testutil::max_abs_diff_vec;
using testutil::rand_tensor;
using testutil::rand_tensor_off_zero;

TEST_CASE("rng: splitmix64 produces the documented stream") {
  Rng r(0);
  CHECK(r.next_u64() == 0xe220a8397b1dcdafULL);
  CHECK(r.next_u64() == 0x6e789e6aa1b965f4ULL);
  CHECK(r.next_u64() == 0x06c45d188009454fULL);
  Rng a(123), b(123);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng c = Rng(123).derive(0), d = Rng(123).derive(1);
  CHECK(c.next_u64() != d.next_u64());
}

TEST_CASE("matmul: identity and zero") {
  auto a = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
  auto eye = Tensor<double>::from({2, 2}, {1, 0, 0, 1});
  auto zero = Tensor<double>::zeros({2, 2});
  auto r = matmul(a, eye);
  for (int i = 0; i < 4; ++i) CHECK(r.data()[i] == a.data()[i]);
  auto z = matmul(a, zero);
  for (int i = 0; i < 4; ++i) CHECK(z.data()[i] == 0.0);
}

TEST_CASE("matmul: matches the triple-loop oracle") {
  Rng rng(11);
  auto a = rand_tensor<double>({3, 4}, rng);
  auto b = rand_tensor<double>({4, 2}, rng);
  auto got = matmul(a, b);
  auto expect = reference::matmul(std::vector<double>(a.data().begin(), a.data().end()),
                                  std::vector<double>(b.data().begin(), b.data().end()), 3, 4, 2);
  CHECK(max_abs_diff_vec<double>(got.data(), expect) < 1e-12);
}

TEST_CASE("matmul: shape mismatch names both shapes") {
  auto a = Tensor<double>::zeros({2, 3});
  auto b = Tensor<double>::zeros({2, 3});
  CHECK_THROWS_WITH_AS(matmul(a, b), doctest::Contains("[2x3]"), std::invalid_argument);
}

TEST_CASE("softmax_rows: symmetry, forced values, stability") {
  auto u = softmax_rows(Tensor<double>::zeros({1, 3}));
  for (int j = 0; j < 3; ++j) CHECK(u.data()[j] == doctest::Approx(1.0 / 3).epsilon(1e-12));

  auto forced = softmax_rows(Tensor<double>::from({1, 2}, {0.0, std::log(3.0)}));
  CHECK(forced.data()[0] == doctest::Approx(0.25).epsilon(1e-12));
  CHECK(forced.data()[1] == doctest::Approx(0.75).epsilon(1e-12));

  auto hot = softmax_rows(Tensor<double>::from({1, 2}, {1000.0, 0.0}));
  CHECK(std::isfinite(hot.data()[0]));
  CHECK(hot.data()[0] == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(hot.data()[1] == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("softmax_rows: rows sum to 1 across magnitudes") {
  Rng rng(22);
  for (int trial = 0; trial < 50; ++trial) {
    const double mag = std::pow(10.0, rng.uniform(-3.0, 3.0));
    auto x = rand_tensor<float>({8, 16}, rng, -mag, mag);
    auto y = softmax_rows(x);
    for (int i = 0; i < 8; ++i) {
      double sum = 0.0;
      for (int j = 0; j < 16; ++j) sum += y.data()[i * 16 + j];
      CHECK(std::abs(sum - 1.0) < 1e-6);
    }
  }
}

TEST_CASE("layer_norm: constant row collapses to beta") {
  auto x = Tensor<double>::full({2, 4}, 3.7);
  auto gamma = Tensor<double>::full({4}, 1.0);
  auto beta = Tensor<double>::zeros({4});
  auto y = layer_norm(x, gamma, beta, 1e-5);
  for (auto v : y.data()) CHECK(std::abs(v) < 1e-9);
}

TEST_CASE("layer_norm: already-normalized row is fixed as eps vanishes") {
  auto x = Tensor<double>::from({1, 2}, {1.0, -1.0});
  auto y = layer_norm(x, Tensor<double>::full({2}, 1.0), Tensor<double>::zeros({2}), 1e-12);
  CHECK(y.data()[0] == doctest::Approx(1.0).epsilon(1e-9));
  CHECK(y.data()[1] == doctest::Approx(-1.0).epsilon(1e-9));
}

TEST_CASE("layer_norm: normalizes row statistics") {
  Rng rng(33);
  auto x = rand_tensor<double>({4, 8}, rng, -2.0, 2.0);
  auto y = layer_norm(x, Tensor<double>::full({8}, 1.0), Tensor<double>::zeros({8}), 1e-5);
  for (int i = 0; i < 4; ++i) {
    double mean = 0.0, var = 0.0;
    for (int j = 0; j < 8; ++j) mean += y.data()[i * 8 + j];
    mean /= 8;
    for (int j = 0; j < 8; ++j) var += (y.data()[i * 8 + j] - mean) * (y.data()[i * 8 + j] - mean);
    var /= 8;
    CHECK(std::abs(mean) < 1e-7);
    CHECK(std::abs(var - 1.0) < 1e-4);
  }
}

TEST_CASE("conv2d: 1x1 scalar kernel scales the input") {
  Rng rng(44);
  auto x = rand_tensor<double>({1, 3, 3}, rng);
  auto k = Tensor<double>::from({1, 1, 1, 1}, {2.0});
  auto y = conv2d(x, k, 1, 0);
  for (int i = 0; i < 9; ++i) CHECK(y.data()[i] == doctest::Approx(2.0 * x.data()[i]));
}

TEST_CASE("conv2d: averaging kernel preserves a constant interior") {
  auto x = Tensor<double>::full({1, 5, 5}, 0.7);
  auto k = Tensor<double>::full({1, 1, 3, 3}, 1.0 / 9);
  auto y = conv2d(x, k, 1, 1);
  REQUIRE(y.dim(1) == 5);
  for (int i = 1; i < 4; ++i)
    for (int j = 1; j < 4; ++j) CHECK(y.data()[i * 5 + j] == doctest::Approx(0.7).epsilon(1e-12));
}

TEST_CASE("conv2d: matches the six-loop oracle") {
  Rng rng(55);
  for (int trial = 0; trial < 20; ++trial) {
    const int stride = 1 + static_cast<int>(rng.uniform_int(0, 1));
    const int pad = static_cast<int>(rng.uniform_int(0, 1));
    auto x = rand_tensor<double>({2, 5, 5}, rng);
    auto k = rand_tensor<double>({3, 2, 3, 3}, rng);
    auto y = conv2d(x, k, stride, pad);
    const int Ho = (5 + 2 * pad - 3) / stride + 1;
    auto expect = reference::conv2d(std::vector<double>(x.data().begin(), x.data().end()),
                                    std::vector<double>(k.data().begin(), k.data().end()), 2, 5, 5,
                                    3, 3, stride, pad, Ho, Ho);
    CHECK(max_abs_diff_vec<double>(y.data(), expect) < 1e-10);
  }
}

TEST_CASE("conv2d: rejects bad geometry") {
  auto x = Tensor<double>::zeros({1, 2, 2});
  auto k = Tensor<double>::zeros({1, 1, 3, 3});
  CHECK_THROWS_AS(conv2d(x, k, 1, 0), std::invalid_argument);  // output would be non-positive
  auto keven = Tensor<double>::zeros({1, 1, 2, 2});
  CHECK_THROWS_AS(conv2d(Tensor<double>::zeros({1, 4, 4}), keven, 1, 0), std::invalid_argument);
}

TEST_CASE("backward: sum gives ones, quadratic gives x") {
  Rng rng(66);
  auto x = rand_tensor<double>({3, 4}, rng, -2.0, 2.0, true);
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    backward(tape, sum_all(x));
  }
  for (auto g : x.grad()) CHECK(g == doctest::Approx(1.0));
  x.zero_grad();
  {
    Tape<double> tape;
    TapeScope<double> scope(tape);
    backward(tape, mul_scalar(sum_all(mul(x, x)), 0.5));
  }
  for (int i = 0; i < x.size(); ++i) CHECK(x.grad()[i] == doctest::Approx(x.data()[i]).epsilon(1e-12));
}

TEST_CASE("backward: rejects non-scalar loss and leaves untouched tensors at zero grad") {
  auto x = Tensor<double>::zeros({2, 2}, true);
  auto unused = Tensor<double>::zeros({3}, true);
  Tape<double> tape;
  TapeScope<double> scope(tape);
  CHECK_THROWS_AS(backward(tape, mul(x, x)), std::invalid_argument);
  backward(tape, sum_all(x));
  for (auto g : unused.grad()) CHECK(g == 0.0);
}

TEST_CASE("grad_check: linear and composed cases") {
  Rng rng(77);
  auto x = rand_tensor<double>({3, 5}, rng, -1.0, 1.0);
  auto err_sum = grad_check<double>([](const Tensor<double>& t) { return sum_all(t); }, x, 1e-5);
  CHECK(err_sum < 1e-10);
  auto err_soft = grad_check<double>(
      [](const Tensor<double>& t) { return sum_all(mul(softmax_rows(t), softmax_rows(t))); }, x, 1e-5);
  CHECK(err_soft < 1e-5);
}

TEST_CASE("grad_check: every differentiable op stays under 1e-4") {
  Rng rng(88);
  const double h = 1e-5;
  auto gc = [&](auto f, const Tensor<double>& x) {
    return grad_check<double>(std::function<Tensor<double>(const Tensor<double>&)>(f), x, h);
  };

  auto x = rand_tensor_off_zero<double>({4, 6}, rng);
  auto other = rand_tensor<double>({4, 6}, rng, 0.5, 1.5);
  CHECK(gc([&](const Tensor<double>& t) { return sum_all(mul(t, other)); }, x) < 1e-4);
  CHECK(gc([&](const Tensor<double>& t) { return sum_all(add(t, other)); }, x) < 1e-4);
  CHECK(gc([&](const Tensor<double>& t) { return sum_all(sub(other, t)); }, x) < 1e-4);
  CHECK(gc([&](const Tensor<double>& t) { return sum_all(div(t, other)); }, x) < 1e-4);
  CHECK(gc([&](const Tensor<double>& t) { return sum_all(div(other, add_scalar(mul(t, t), 1.0))); }, x) < 1e-4);
  CHECK(gc([&](const Tensor<double>& t) { return sum_all(relu(t)); }, x) < 1e-4);
  CHECK(gc([&](const Tensor<double>& t) { return sum_all(maximum(t, other)); }, x) < 1e-4);
  CHECK(gc([&](const Tensor<double>& t) { return mean_all(mul(t, t)); }, x) < 1e-4);
  CHECK(gc([&](const Tensor<double>& t) { return max_all(mul(t, t)); }, x) < 1e-4);
  CHECK(gc([&](const Tensor<double>& t) { return sum_all(mul(transpose2d(t), transpose2d(t))); }, x) < 1e-4);
  CHECK(gc([&](const Tensor<double>& t) { return sum_all(mul(reshape(t, {2, 12}), reshape(t, {2, 12}))); }, x) < 1e-4);

  auto w = rand_tensor<double>({6, 3}, rng);
  CHECK(gc([&](const Tensor<double>& t) { return sum_all(mul(matmul(t, w), matmul(t, w))); }, x) < 1e-4);
  CHECK(gc([&](const Tensor<double>& t) { return sum_all(mul(matmul(x, t), matmul(x, t))); }, w) < 1e-4);

  CHECK(gc([&](const Tensor<double>& t) { return sum_all(mul(softmax_rows(t), other)); }, x) < 1e-4);

  auto gamma = rand_tensor<double>({6}, rng, 0.5, 1.5);
  auto beta = rand_tensor<double>({6}, rng);
  CHECK(gc([&](const Tensor<double>& t) {
          return sum_all(mul(layer_norm(t, gamma, beta, 1e-5), other));
        }, x) < 1e-4);
  CHECK(gc([&](const Tensor<double>& g2) {
          return sum_all(mul(layer_norm(x, g2, beta, 1e-5), other));
        }, gamma) < 1e-4);
  CHECK(gc([&](const Tensor<double>& b2) {
          return sum_all(mul(layer_norm(x, gamma, b2, 1e-5), other));
        }, beta) < 1e-4);

  auto img = rand_tensor_off_zero<double>({2, 6, 6}, rng);
  auto kern = rand_tensor<double>({3, 2, 3, 3}, rng);
  auto weight_map = rand_tensor<double>({3, 6, 6}, rng);
  CHECK(gc([&](const Tensor<double>& t) { return sum_all(mul(conv2d(t, kern, 1, 1), weight_map)); }, img) < 1e-4);
  CHECK(gc([&](const Tensor<double>& t) { return sum_all(mul(conv2d(img, t, 1, 1), weight_map)); }, kern) < 1e-4);

  auto cbias = rand_tensor<double>({2}, rng);
  CHECK(gc([&](const Tensor<double>& t) { return sum_all(mul(add_channel_bias(img, cbias), add_channel_bias(t, cbias))); }, img) < 1e-4);
  CHECK(gc([&](const Tensor<double>& t) { return sum_all(mul(add_channel_bias(img, t), img)); }, cbias) < 1e-4);
  auto rbias = rand_tensor<double>({6}, rng);
  CHECK(gc([&](const Tensor<double>& t) { return sum_all(mul(add_row_bias(x, t), other)); }, rbias) < 1e-4);

  CHECK(gc([&](const Tensor<double>& t) { return sum_all(mul(maxpool2x2(t), maxpool2x2(t))); }, img) < 1e-4);
  CHECK(gc([&](const Tensor<double>& t) { return sum_all(mul(upsample_nn2x(t), upsample_nn2x(t))); }, img) < 1e-4);
  CHECK(gc([&](const Tensor<double>& t) {
          return sum_all(mul(pad_reflect_bottom_right(t, 2, 1), pad_reflect_bottom_right(t, 2, 1)));
        }, img) < 1e-4);

  auto part = rand_tensor<double>({2, 6}, rng);
  CHECK(gc([&](const Tensor<double>& t) {
          auto c = concat_rows<double>({t, part});
          return sum_all(mul(c, c));
        }, x) < 1e-4);
  auto cols = rand_tensor<double>({4, 2}, rng);
  CHECK(gc([&](const Tensor<double>& t) {
          auto c = concat_cols<double>({t, cols});
          return sum_all(mul(c, c));
        }, x) < 1e-4);
}

TEST_CASE("elementwise: scalar broadcast works both ways") {
  auto a = Tensor<double>::from({2, 2}, {1, 2, 3, 4});
  auto s = Tensor<double>::scalar(10.0);
  auto r1 = add(a, s);
  CHECK(r1.data()[3] == 14.0);
  auto r2 = mul(s, a);
  CHECK(r2.shape() == Shape{2, 2});
  CHECK(r2.data()[2] == 30.0);
}

TEST_CASE("kernels: results are identical across thread counts") {
#ifdef _OPENMP
  Rng rng(99);
  auto a = rand_tensor<float>({37, 41}, rng);
  auto b = rand_tensor<float>({41, 29}, rng);
  const int saved = omp_get_max_threads();
  omp_set_num_threads(1);
  auto r1 = matmul(a, b);
  auto s1 = softmax_rows(b);
  omp_set_num_threads(2);
  auto r2 = matmul(a, b);
  auto s2 = softmax_rows(b);
  omp_set_num_threads(saved);
  for (std::int64_t i = 0; i < r1.size(); ++i) CHECK(r1.data()[i] == r2.data()[i]);
  for (std::int64_t i = 0; i < s1.size(); ++i) CHECK(s1.data()[i] == s2.data()[i]);
#endif
}

TEST_CASE("adam_step: matches the hand formula; lr=0 is a no-op") {
  AdamConfig cfg;
  cfg.lr = 1e-2;
  auto p = Tensor<double>::from({2}, {1.0, -2.0});
  std::vector<double> g{0.5, -0.25}, m(2, 0.0), v(2, 0.0);
  adam_step<double>(p, std::span<const double>(g.data(), 2), m, v, 1, cfg);
  for (int i = 0; i < 2; ++i) {
    const double mh = (0.1 * g[i]) / (1 - 0.9);
    const double vh = (0.001 * g[i] * g[i]) / (1 - 0.999);
    const double expect = (i == 0 ? 1.0 : -2.0) - cfg.lr * mh / (std::sqrt(vh) + cfg.eps);
    CHECK(p.data()[i] == doctest::Approx(expect).epsilon(1e-12));
  }

  AdamConfig zero = cfg;
  zero.lr = 0.0;
  auto q = Tensor<double>::from({2}, {3.0, 4.0});
  std::vector<double> m2(2, 0.0), v2(2, 0.0);
  adam_step<double>(q, std::span<const double>(g.data(), 2), m2, v2, 1, zero);
  CHECK(q.data()[0] == 3.0);
  CHECK(q.data()[1] == 4.0);
}

TEST_CASE("tensor io: round-trip and error reporting") {
  Rng rng(111);
  auto t = rand_tensor<float>({2, 3, 4}, rng);
  const std::string dir = std::filesystem::temp_directory_path().string() + "/oscount_test_io";
  std::filesystem::create_directories(dir);
  const std::string path = dir + "/t.tnsr";
  write_tensor(t, path);
  auto back = read_tensor(path);
  REQUIRE(back.shape() == t.shape());
  for (std::int64_t i = 0; i < t.size(); ++i) CHECK(back.data()[i] == t.data()[i]);

  {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f << "TNSZ";
  }
  CHECK_THROWS_WITH_AS(read_tensor(path), doctest::Contains("byte offset 0"), std::runtime_error);

  {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    std::uint32_t ndim = 1, d = 10;
    f << "TNSR";
    f.write(reinterpret_cast<char*>(&ndim), 4);
    f.write(reinterpret_cast<char*>(&d), 4);
    float one = 1.0f;
    f.write(reinterpret_cast<char*>(&one), 4);  // payload too short
  }
  CHECK_THROWS_WITH_AS(read_tensor(path), doctest::Contains("truncated"), std::runtime_error);
}

TEST_CASE("pgm: writes a scaled preview") {
  auto t = Tensor<float>::from({2, 2}, {0.0f, 0.5f, 1.0f, 2.0f});
  const std::string dir = std::filesystem::temp_directory_path().string() + "/oscount_test_io";
  std::filesystem::create_directories(dir);
  write_pgm(t, dir + "/t.pgm");
  const std::string bytes = read_file_bytes(dir + "/t.pgm");
  CHECK(bytes.substr(0, 2) == "P5");
  CHECK(static_cast<unsigned char>(bytes.back()) == 255);
}
