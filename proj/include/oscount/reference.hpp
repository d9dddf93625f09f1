#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <vector>

// Serial reference implementations, written as the most direct loops
// possible. They are the oracles the test suites compare the OpenMP kernels
// against and the baseline the benchmark measures speedups from. Nothing in
// src/ may call into this namespace from a production path.
namespace oscount::reference {

// Plain triple loop, C(M x N) = A(M x K) * B(K x N).
template <typename T>
std::vector<T> matmul(const std::vector<T>& a, const std::vector<T>& b, int M, int K, int N) {
  std::vector<T> c(static_cast<std::size_t>(M) * N, T(0));
  for (int i = 0; i < M; ++i)
    for (int j = 0; j < N; ++j) {
      T acc = T(0);
      for (int k = 0; k < K; ++k)
        acc += a[static_cast<std::size_t>(i) * K + k] * b[static_cast<std::size_t>(k) * N + j];
      c[static_cast<std::size_t>(i) * N + j] = acc;
    }
  return c;
}

// Six nested loops over (co, oy, ox, ci, ky, kx); zero padding.
template <typename T>
std::vector<T> conv2d(const std::vector<T>& x, const std::vector<T>& kern, int Cin, int H, int W,
                      int Cout, int k, int stride, int pad, int Ho, int Wo) {
  std::vector<T> out(static_cast<std::size_t>(Cout) * Ho * Wo, T(0));
  for (int co = 0; co < Cout; ++co)
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox) {
        T acc = T(0);
        for (int ci = 0; ci < Cin; ++ci)
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              const int iy = oy * stride - pad + ky;
              const int ix = ox * stride - pad + kx;
              if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
              acc += x[(static_cast<std::size_t>(ci) * H + iy) * W + ix] *
                     kern[((static_cast<std::size_t>(co) * Cin + ci) * k + ky) * k + kx];
            }
        out[(static_cast<std::size_t>(co) * Ho + oy) * Wo + ox] = acc;
      }
  return out;
}

template <typename T>
std::vector<T> softmax_rows(const std::vector<T>& x, int rows, int cols) {
  std::vector<T> y(x.size());
  for (int i = 0; i < rows; ++i) {
    const T* xr = x.data() + static_cast<std::size_t>(i) * cols;
    T* yr = y.data() + static_cast<std::size_t>(i) * cols;
    T m = xr[0];
    for (int j = 1; j < cols; ++j) m = std::max(m, xr[j]);
    T sum = T(0);
    for (int j = 0; j < cols; ++j) {
      yr[j] = std::exp(xr[j] - m);
      sum += yr[j];
    }
    for (int j = 0; j < cols; ++j) yr[j] /= sum;
  }
  return y;
}

template <typename T>
std::vector<T> layer_norm_rows(const std::vector<T>& x, const std::vector<T>& gamma,
                               const std::vector<T>& beta, int rows, int cols, T eps) {
  std::vector<T> y(x.size());
  for (int i = 0; i < rows; ++i) {
    const T* xr = x.data() + static_cast<std::size_t>(i) * cols;
    T mean = T(0);
    for (int j = 0; j < cols; ++j) mean += xr[j];
    mean /= static_cast<T>(cols);
    T var = T(0);
    for (int j = 0; j < cols; ++j) var += (xr[j] - mean) * (xr[j] - mean);
    var /= static_cast<T>(cols);
    for (int j = 0; j < cols; ++j)
      y[static_cast<std::size_t>(i) * cols + j] =
          gamma[j] * (xr[j] - mean) / std::sqrt(var + eps) + beta[j];
  }
  return y;
}

// Single-head scaled dot-product attention, recomputed directly from the
// dense formula: softmax((q Wq)(k Wk)^T / sqrt(dh)) (v Wv).
template <typename T>
std::vector<T> scaled_attention(const std::vector<T>& q, const std::vector<T>& k,
                                const std::vector<T>& v, const std::vector<T>& wq,
                                const std::vector<T>& wk, const std::vector<T>& wv, int Lq, int Lk,
                                int d, int dh) {
  const std::vector<T> qp = matmul(q, wq, Lq, d, dh);
  const std::vector<T> kp = matmul(k, wk, Lk, d, dh);
  const std::vector<T> vp = matmul(v, wv, Lk, d, dh);
  std::vector<T> logits(static_cast<std::size_t>(Lq) * Lk, T(0));
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  for (int i = 0; i < Lq; ++i)
    for (int j = 0; j < Lk; ++j) {
      T acc = T(0);
      for (int e = 0; e < dh; ++e)
        acc += qp[static_cast<std::size_t>(i) * dh + e] * kp[static_cast<std::size_t>(j) * dh + e];
      logits[static_cast<std::size_t>(i) * Lk + j] = acc * scale;
    }
  const std::vector<T> attn = softmax_rows(logits, Lq, Lk);
  return matmul(attn, vp, Lq, Lk, dh);
}

// Two independent passes over the pairs, one per statistic.
inline void mae_rmse(const std::vector<std::pair<double, double>>& gt_pred, double* mae,
                     double* rmse) {
  double abs_sum = 0.0;
  for (const auto& [gt, pred] : gt_pred) abs_sum += std::abs(gt - pred);
  *mae = abs_sum / static_cast<double>(gt_pred.size());
  double sq_sum = 0.0;
  for (const auto& [gt, pred] : gt_pred) sq_sum += (gt - pred) * (gt - pred);
  *rmse = std::sqrt(sq_sum / static_cast<double>(gt_pred.size()));
}

// SSIM of two constant maps: variance and covariance terms vanish, leaving
// the luminance ratio.
inline double ssim_of_constants(double a, double b, double c1) {
  return (2.0 * a * b + c1) / (a * a + b * b + c1);
}

}  // namespace oscount::reference
