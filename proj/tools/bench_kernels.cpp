// Times the OpenMP kernels against the serial reference loops and reports
// speedups. Also times one full model forward/backward step at the default
// configuration.

#include <chrono>
#include <cstdio>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "oscount/kernels.hpp"
#include "oscount/model.hpp"
#include "oscount/reference.hpp"
#include "oscount/rng.hpp"

using namespace oscount;

namespace {

using Clock = std::chrono::steady_clock;

template <typename F>
double time_best_of(int reps, F f) {
  double best = 1e300;
  for (int i = 0; i < reps; ++i) {
    const auto t0 = Clock::now();
    f();
    const auto t1 = Clock::now();
    best = std::min(best, std::chrono::duration<double>(t1 - t0).count());
  }
  return best;
}

std::vector<float> random_vec(std::size_t n, Rng& rng) {
  std::vector<float> v(n);
  for (auto& x : v) x = static_cast<float>(rng.uniform(-1.0, 1.0));
  return v;
}

void bench_gemm(int n, Rng& rng) {
  const auto a = random_vec(static_cast<std::size_t>(n) * n, rng);
  const auto b = random_vec(static_cast<std::size_t>(n) * n, rng);
  std::vector<float> c(static_cast<std::size_t>(n) * n);
  const double t_par = time_best_of(3, [&] { kernels::gemm_nn(a.data(), b.data(), c.data(), n, n, n); });
  const double t_ref = time_best_of(3, [&] { auto r = reference::matmul(a, b, n, n, n); (void)r; });
  const double gflops = 2.0 * n * n * n / t_par / 1e9;
  std::printf("gemm      %4dx%-4d  parallel %8.3f ms (%6.2f GFLOP/s)  serial %8.3f ms  speedup %.2fx\n",
              n, n, t_par * 1e3, gflops, t_ref * 1e3, t_ref / t_par);
}

void bench_conv(int C, int H, Rng& rng) {
  const int Cout = 2 * C, k = 3, pad = 1;
  const auto x = random_vec(static_cast<std::size_t>(C) * H * H, rng);
  const auto kern = random_vec(static_cast<std::size_t>(Cout) * C * k * k, rng);
  const int patch = C * k * k;
  std::vector<float> col(static_cast<std::size_t>(patch) * H * H);
  std::vector<float> out(static_cast<std::size_t>(Cout) * H * H);
  const double t_par = time_best_of(3, [&] {
    kernels::im2col(x.data(), col.data(), C, H, H, k, 1, pad, H, H);
    kernels::gemm_nn(kern.data(), col.data(), out.data(), Cout, patch, H * H);
  });
  const double t_ref =
      time_best_of(3, [&] { auto r = reference::conv2d(x, kern, C, H, H, Cout, k, 1, pad, H, H); (void)r; });
  std::printf("conv3x3   %3dc %3dpx  parallel %8.3f ms                    serial %8.3f ms  speedup %.2fx\n",
              C, H, t_par * 1e3, t_ref * 1e3, t_ref / t_par);
}

void bench_softmax(int rows, int cols, Rng& rng) {
  const auto x = random_vec(static_cast<std::size_t>(rows) * cols, rng);
  std::vector<float> y(x.size());
  const double t_par = time_best_of(5, [&] { kernels::softmax_rows(x.data(), y.data(), rows, cols); });
  const double t_ref = time_best_of(5, [&] { auto r = reference::softmax_rows(x, rows, cols); (void)r; });
  std::printf("softmax   %4dx%-4d  parallel %8.3f ms                    serial %8.3f ms  speedup %.2fx\n",
              rows, cols, t_par * 1e3, t_ref * 1e3, t_ref / t_par);
}

void bench_model_step() {
  ModelConfig cfg;
  CountingModel<float> model(cfg);
  Rng rng(7);
  Tensor<float> image = Tensor<float>::zeros({3, 64, 64});
  for (auto& v : image.data()) v = static_cast<float>(rng.uniform(0.0, 1.0));
  const SupportBox box{20, 20, 31, 31};
  std::vector<std::array<double, 2>> points{{32, 32}, {10, 12}, {50, 40}};
  const double t_fwd = time_best_of(3, [&] {
    const DensityMap<float> d = model.forward(image, box);
    (void)d.count();
  });
  const double t_step = time_best_of(3, [&] {
    Tape<float> tape;
    TapeScope<float> scope(tape);
    const Tensor<float> loss = sample_loss(model, image, box, points);
    backward(tape, loss);
    model.zero_grads();
  });
  std::printf("model     64x64 img  forward  %8.3f ms         forward+backward %8.3f ms\n",
              t_fwd * 1e3, t_step * 1e3);
}

}  // namespace

int main() {
#ifdef _OPENMP
  std::printf("threads: %d\n", omp_get_max_threads());
#endif
  Rng rng(42);
  bench_gemm(64, rng);
  bench_gemm(128, rng);
  bench_gemm(256, rng);
  bench_conv(16, 64, rng);
  bench_conv(32, 32, rng);
  bench_softmax(64, 80, rng);
  bench_softmax(512, 512, rng);
  bench_model_step();
  return 0;
}
