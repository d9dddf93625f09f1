#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <vector>

#ifdef _OPENMP
#include <omp.h>
#endif

// OpenMP compute kernels. Parallelism is always partitioned over output
// elements with a static schedule and every accumulation runs sequentially
// inside the owning thread, so results are bit-identical for any thread
// count. Global reductions stay serial for the same reason.
namespace oscount::kernels {

inline constexpr std::int64_t kParallelCutoff = 1 << 14;

// C(M x N) = A(M x K) * B(K x N); accumulate adds into C instead of overwriting.
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, int M, int K, int N, bool accumulate = false) {
  const std::int64_t work = static_cast<std::int64_t>(M) * K * N;
#pragma omp parallel for schedule(static) if (M > 1 && work > kParallelCutoff)
  for (int i = 0; i < M; ++i) {
    T* crow = c + static_cast<std::size_t>(i) * N;
    if (!accumulate) std::fill(crow, crow + N, T(0));
    const T* arow = a + static_cast<std::size_t>(i) * K;
    for (int k = 0; k < K; ++k) {
      const T aik = arow[k];
      const T* brow = b + static_cast<std::size_t>(k) * N;
      for (int j = 0; j < N; ++j) crow[j] += aik * brow[j];
    }
  }
}

// C(M x N) = A(M x K) * B^T where B is stored N x K.
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, int M, int K, int N, bool accumulate = false) {
  const std::int64_t work = static_cast<std::int64_t>(M) * K * N;
#pragma omp parallel for schedule(static) if (M > 1 && work > kParallelCutoff)
  for (int i = 0; i < M; ++i) {
    const T* arow = a + static_cast<std::size_t>(i) * K;
    T* crow = c + static_cast<std::size_t>(i) * N;
    for (int j = 0; j < N; ++j) {
      const T* brow = b + static_cast<std::size_t>(j) * K;
      T acc = T(0);
      for (int k = 0; k < K; ++k) acc += arow[k] * brow[k];
      if (accumulate)
        crow[j] += acc;
      else
        crow[j] = acc;
    }
  }
}

// C(M x N) = A^T * B where A is stored K x M and B is K x N.
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, int M, int K, int N, bool accumulate = false) {
  const std::int64_t work = static_cast<std::int64_t>(M) * K * N;
#pragma omp parallel for schedule(static) if (M > 1 && work > kParallelCutoff)
  for (int i = 0; i < M; ++i) {
    T* crow = c + static_cast<std::size_t>(i) * N;
    if (!accumulate) std::fill(crow, crow + N, T(0));
    for (int k = 0; k < K; ++k) {
      const T aki = a[static_cast<std::size_t>(k) * M + i];
      const T* brow = b + static_cast<std::size_t>(k) * N;
      for (int j = 0; j < N; ++j) crow[j] += aki * brow[j];
    }
  }
}

// Numerically stable row softmax (max subtraction), one thread per row.
template <typename T>
void softmax_rows(const T* x, T* y, int rows, int cols) {
#pragma omp parallel for schedule(static) if (rows > 1 && static_cast<std::int64_t>(rows) * cols > 4096)
  for (int i = 0; i < rows; ++i) {
    const T* xr = x + static_cast<std::size_t>(i) * cols;
    T* yr = y + static_cast<std::size_t>(i) * cols;
    T m = xr[0];
    for (int j = 1; j < cols; ++j) m = std::max(m, xr[j]);
    T sum = T(0);
    for (int j = 0; j < cols; ++j) {
      yr[j] = std::exp(xr[j] - m);
      sum += yr[j];
    }
    const T inv = T(1) / sum;
    for (int j = 0; j < cols; ++j) yr[j] *= inv;
  }
}

// Row layer norm: y = gamma * (x - mean) / sqrt(var + eps) + beta,
// population variance per row.
template <typename T>
void layer_norm_rows(const T* x, const T* gamma, const T* beta, T* y, int rows, int cols, T eps) {
#pragma omp parallel for schedule(static) if (rows > 1 && static_cast<std::int64_t>(rows) * cols > 4096)
  for (int i = 0; i < rows; ++i) {
    const T* xr = x + static_cast<std::size_t>(i) * cols;
    T* yr = y + static_cast<std::size_t>(i) * cols;
    T mean = T(0);
    for (int j = 0; j < cols; ++j) mean += xr[j];
    mean /= static_cast<T>(cols);
    T var = T(0);
    for (int j = 0; j < cols; ++j) {
      const T d = xr[j] - mean;
      var += d * d;
    }
    var /= static_cast<T>(cols);
    const T inv = T(1) / std::sqrt(var + eps);
    for (int j = 0; j < cols; ++j) yr[j] = gamma[j] * (xr[j] - mean) * inv + beta[j];
  }
}

// Unfolds conv patches: col is (Cin*k*k) x (Ho*Wo), zero padding.
template <typename T>
void im2col(const T* x, T* col, int Cin, int H, int W, int k, int stride, int pad, int Ho, int Wo) {
  const int patch = Cin * k * k;
#pragma omp parallel for schedule(static) if (patch > 1 && static_cast<std::int64_t>(patch) * Ho * Wo > kParallelCutoff)
  for (int r = 0; r < patch; ++r) {
    const int ci = r / (k * k);
    const int ky = (r / k) % k;
    const int kx = r % k;
    T* crow = col + static_cast<std::size_t>(r) * Ho * Wo;
    for (int oy = 0; oy < Ho; ++oy) {
      const int iy = oy * stride - pad + ky;
      for (int ox = 0; ox < Wo; ++ox) {
        const int ix = ox * stride - pad + kx;
        const bool in = iy >= 0 && iy < H && ix >= 0 && ix < W;
        crow[static_cast<std::size_t>(oy) * Wo + ox] =
            in ? x[(static_cast<std::size_t>(ci) * H + iy) * W + ix] : T(0);
      }
    }
  }
}

// Scatter-add of a col matrix back onto the input grid (serial: cells overlap).
template <typename T>
void col2im_add(const T* col, T* x, int Cin, int H, int W, int k, int stride, int pad, int Ho, int Wo) {
  const int patch = Cin * k * k;
  for (int r = 0; r < patch; ++r) {
    const int ci = r / (k * k);
    const int ky = (r / k) % k;
    const int kx = r % k;
    const T* crow = col + static_cast<std::size_t>(r) * Ho * Wo;
    for (int oy = 0; oy < Ho; ++oy) {
      const int iy = oy * stride - pad + ky;
      if (iy < 0 || iy >= H) continue;
      for (int ox = 0; ox < Wo; ++ox) {
        const int ix = ox * stride - pad + kx;
        if (ix < 0 || ix >= W) continue;
        x[(static_cast<std::size_t>(ci) * H + iy) * W + ix] += crow[static_cast<std::size_t>(oy) * Wo + ox];
      }
    }
  }
}

template <typename T, typename F>
void map_elementwise(const T* x, T* y, std::int64_t n, F f) {
#pragma omp parallel for schedule(static) if (n > kParallelCutoff)
  for (std::int64_t i = 0; i < n; ++i) y[i] = f(x[i]);
}

// Serial sum: keeps the reduction order fixed no matter the thread count.
template <typename T>
T sum_serial(const T* x, std::int64_t n) {
  T acc = T(0);
  for (std::int64_t i = 0; i < n; ++i) acc += x[i];
  return acc;
}

}  // namespace oscount::kernels
