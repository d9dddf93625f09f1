#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "oscount/kernels.hpp"
#include "oscount/tensor.hpp"

// Differentiable tensor ops. Every op computes its forward result through
// the kernels, and, when a tape is armed and an input tracks gradients,
// records one closure that accumulates input gradients from the output
// gradient. Ops never mutate their inputs.
namespace oscount {

namespace detail {

template <typename T>
bool track_any(const Tensor<T>& a) {
  return tape_active<T>() && a.requires_grad();
}

template <typename T>
bool track_any(const Tensor<T>& a, const Tensor<T>& b) {
  return tape_active<T>() && (a.requires_grad() || b.requires_grad());
}

// Binary elementwise shapes: identical, or one side is a single element
// broadcast over the other.
template <typename T>
void check_binary_shapes(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
  if (a.shape() == b.shape() || a.size() == 1 || b.size() == 1) return;
  throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                              " vs " + shape_str(b.shape()));
}

}  // namespace detail

template <typename T, typename Fwd, typename BwdA, typename BwdB>
Tensor<T> binary_elementwise(const Tensor<T>& a, const Tensor<T>& b, const char* name, Fwd fwd,
                             BwdA dfda, BwdB dfdb) {
  detail::check_binary_shapes(a, b, name);
  const bool a_scalar = a.size() == 1 && b.size() > 1;
  const bool b_scalar = b.size() == 1 && a.size() > 1;
  const Shape& out_shape = b_scalar || a.size() >= b.size() ? a.shape() : b.shape();
  const std::int64_t n = shape_numel(out_shape);
  const bool track = detail::track_any(a, b);
  Tensor<T> out = Tensor<T>::zeros(out_shape, track);
  const T* pa = a.data().data();
  const T* pb = b.data().data();
  T* po = out.data().data();
#pragma omp parallel for schedule(static) if (n > kernels::kParallelCutoff)
  for (std::int64_t i = 0; i < n; ++i)
    po[i] = fwd(pa[a_scalar ? 0 : i], pb[b_scalar ? 0 : i]);
  debug_check_finite(out, name);
  if (track) {
    Tape<T>::current()->push([a, b, out, a_scalar, b_scalar, n, dfda, dfdb]() mutable {
      const T* pa2 = a.data().data();
      const T* pb2 = b.data().data();
      const T* g = out.grad().data();
      if (a.requires_grad()) {
        T* ga = a.grad().data();
        for (std::int64_t i = 0; i < n; ++i)
          ga[a_scalar ? 0 : i] += g[i] * dfda(pa2[a_scalar ? 0 : i], pb2[b_scalar ? 0 : i]);
      }
      if (b.requires_grad()) {
        T* gb = b.grad().data();
        for (std::int64_t i = 0; i < n; ++i)
          gb[b_scalar ? 0 : i] += g[i] * dfdb(pa2[a_scalar ? 0 : i], pb2[b_scalar ? 0 : i]);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_elementwise(
      a, b, "add", [](T x, T y) { return x + y; }, [](T, T) { return T(1); },
      [](T, T) { return T(1); });
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_elementwise(
      a, b, "sub", [](T x, T y) { return x - y; }, [](T, T) { return T(1); },
      [](T, T) { return T(-1); });
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_elementwise(
      a, b, "mul", [](T x, T y) { return x * y; }, [](T, T y) { return y; },
      [](T x, T) { return x; });
}

template <typename T>
Tensor<T> div(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_elementwise(
      a, b, "div", [](T x, T y) { return x / y; }, [](T, T y) { return T(1) / y; },
      [](T x, T y) { return -x / (y * y); });
}

// Elementwise max; ties route the gradient to the first argument.
template <typename T>
Tensor<T> maximum(const Tensor<T>& a, const Tensor<T>& b) {
  return binary_elementwise(
      a, b, "maximum", [](T x, T y) { return x >= y ? x : y; },
      [](T x, T y) { return x >= y ? T(1) : T(0); },
      [](T x, T y) { return x >= y ? T(0) : T(1); });
}

template <typename T>
Tensor<T> add_scalar(const Tensor<T>& a, T c) {
  return add(a, Tensor<T>::scalar(c));
}

template <typename T>
Tensor<T> mul_scalar(const Tensor<T>& a, T c) {
  return mul(a, Tensor<T>::scalar(c));
}

template <typename T>
Tensor<T> relu(const Tensor<T>& a) {
  const bool track = detail::track_any(a);
  Tensor<T> out = Tensor<T>::zeros(a.shape(), track);
  kernels::map_elementwise(a.data().data(), out.data().data(), a.size(),
                           [](T x) { return x > T(0) ? x : T(0); });
  if (track) {
    Tape<T>::current()->push([a, out]() mutable {
      const T* x = a.data().data();
      const T* g = out.grad().data();
      T* ga = a.grad().data();
      const std::int64_t n = a.size();
      for (std::int64_t i = 0; i < n; ++i)
        if (x[i] > T(0)) ga[i] += g[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0))
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                                shape_str(b.shape()));
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  const bool track = detail::track_any(a, b);
  Tensor<T> out = Tensor<T>::zeros({m, n}, track);
  kernels::gemm_nn(a.data().data(), b.data().data(), out.data().data(), m, k, n);
  debug_check_finite(out, "matmul");
  if (track) {
    Tape<T>::current()->push([a, b, out, m, k, n]() mutable {
      const T* g = out.grad().data();
      if (a.requires_grad())  // dA += dC * B^T
        kernels::gemm_nt(g, b.data().data(), a.grad().data(), m, n, k, /*accumulate=*/true);
      if (b.requires_grad())  // dB += A^T * dC
        kernels::gemm_tn(a.data().data(), g, b.grad().data(), k, m, n, /*accumulate=*/true);
    });
  }
  return out;
}

template <typename T>
Tensor<T> transpose2d(const Tensor<T>& a) {
  if (a.ndim() != 2) throw std::invalid_argument("transpose2d: need 2-d tensor, got " + shape_str(a.shape()));
  const int r = a.dim(0), c = a.dim(1);
  const bool track = detail::track_any(a);
  Tensor<T> out = Tensor<T>::zeros({c, r}, track);
  const T* pa = a.data().data();
  T* po = out.data().data();
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) po[static_cast<std::size_t>(j) * r + i] = pa[static_cast<std::size_t>(i) * c + j];
  if (track) {
    Tape<T>::current()->push([a, out, r, c]() mutable {
      const T* g = out.grad().data();
      T* ga = a.grad().data();
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < c; ++j)
          ga[static_cast<std::size_t>(i) * c + j] += g[static_cast<std::size_t>(j) * r + i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, Shape shape) {
  if (shape_numel(shape) != a.size())
    throw std::invalid_argument("reshape: " + shape_str(a.shape()) + " does not fill " + shape_str(shape));
  const bool track = detail::track_any(a);
  Tensor<T> out = Tensor<T>::from(std::move(shape), {a.data().begin(), a.data().end()}, track);
  if (track) {
    Tape<T>::current()->push([a, out]() mutable {
      const T* g = out.grad().data();
      T* ga = a.grad().data();
      const std::int64_t n = a.size();
      for (std::int64_t i = 0; i < n; ++i) ga[i] += g[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> flatten(const Tensor<T>& a) {
  return reshape(a, {static_cast<int>(a.size())});
}

namespace detail {

template <typename T>
Tensor<T> concat2d(const std::vector<Tensor<T>>& parts, int axis) {
  if (parts.empty()) throw std::invalid_argument("concat: no tensors");
  const int other = 1 - axis;
  int total = 0;
  for (const auto& p : parts) {
    if (p.ndim() != 2 || p.dim(other) != parts.front().dim(other))
      throw std::invalid_argument("concat: mismatched shapes " + shape_str(p.shape()) + " vs " +
                                  shape_str(parts.front().shape()));
    total += p.dim(axis);
  }
  Shape out_shape = parts.front().shape();
  out_shape[static_cast<std::size_t>(axis)] = total;
  bool any_grad = false;
  for (const auto& p : parts) any_grad = any_grad || p.requires_grad();
  const bool track = tape_active<T>() && any_grad;
  Tensor<T> out = Tensor<T>::zeros(out_shape, track);
  const int rows = out_shape[0], cols = out_shape[1];
  int offset = 0;
  for (const auto& p : parts) {
    const T* src = p.data().data();
    if (axis == 0) {
      std::copy(src, src + p.size(), out.data().data() + static_cast<std::size_t>(offset) * cols);
    } else {
      for (int i = 0; i < rows; ++i)
        std::copy(src + static_cast<std::size_t>(i) * p.dim(1), src + static_cast<std::size_t>(i + 1) * p.dim(1),
                  out.data().data() + static_cast<std::size_t>(i) * cols + offset);
    }
    offset += p.dim(axis);
  }
  if (track) {
    Tape<T>::current()->push([parts, out, axis, rows, cols]() mutable {
      const T* g = out.grad().data();
      int off = 0;
      for (auto& p : parts) {
        if (p.requires_grad()) {
          T* gp = p.grad().data();
          if (axis == 0) {
            const std::int64_t n = p.size();
            for (std::int64_t i = 0; i < n; ++i) gp[i] += g[static_cast<std::size_t>(off) * cols + i];
          } else {
            for (int i = 0; i < rows; ++i)
              for (int j = 0; j < p.dim(1); ++j)
                gp[static_cast<std::size_t>(i) * p.dim(1) + j] += g[static_cast<std::size_t>(i) * cols + off + j];
          }
        }
        off += p.dim(axis);
      }
    });
  }
  return out;
}

}  // namespace detail

/// Stacks (Li x d) matrices along the token axis.
template <typename T>
Tensor<T> concat_rows(const std::vector<Tensor<T>>& parts) {
  return detail::concat2d(parts, 0);
}

/// Stacks (L x di) matrices along the feature axis.
template <typename T>
Tensor<T> concat_cols(const std::vector<Tensor<T>>& parts) {
  return detail::concat2d(parts, 1);
}

template <typename T>
Tensor<T> softmax_rows(const Tensor<T>& a) {
  if (a.ndim() != 2) throw std::invalid_argument("softmax_rows: need 2-d tensor, got " + shape_str(a.shape()));
  const int rows = a.dim(0), cols = a.dim(1);
  const bool track = detail::track_any(a);
  Tensor<T> out = Tensor<T>::zeros(a.shape(), track);
  kernels::softmax_rows(a.data().data(), out.data().data(), rows, cols);
  debug_check_finite(out, "softmax_rows");
  if (track) {
    Tape<T>::current()->push([a, out, rows, cols]() mutable {
      const T* y = out.data().data();
      const T* g = out.grad().data();
      T* ga = a.grad().data();
#pragma omp parallel for schedule(static) if (rows > 1 && static_cast<std::int64_t>(rows) * cols > 4096)
      for (int i = 0; i < rows; ++i) {
        const T* yr = y + static_cast<std::size_t>(i) * cols;
        const T* gr = g + static_cast<std::size_t>(i) * cols;
        T dot = T(0);
        for (int j = 0; j < cols; ++j) dot += gr[j] * yr[j];
        T* gar = ga + static_cast<std::size_t>(i) * cols;
        for (int j = 0; j < cols; ++j) gar[j] += yr[j] * (gr[j] - dot);
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gamma, const Tensor<T>& beta, T eps) {
  if (x.ndim() != 2) throw std::invalid_argument("layer_norm: need 2-d tensor, got " + shape_str(x.shape()));
  const int rows = x.dim(0), cols = x.dim(1);
  if (gamma.size() != cols || beta.size() != cols)
    throw std::invalid_argument("layer_norm: affine params " + shape_str(gamma.shape()) + "/" +
                                shape_str(beta.shape()) + " do not match width " + std::to_string(cols));
  if (eps <= T(0)) throw std::invalid_argument("layer_norm: eps must be positive");
  const bool track = tape_active<T>() &&
                     (x.requires_grad() || gamma.requires_grad() || beta.requires_grad());
  Tensor<T> out = Tensor<T>::zeros(x.shape(), track);
  kernels::layer_norm_rows(x.data().data(), gamma.data().data(), beta.data().data(),
                           out.data().data(), rows, cols, eps);
  debug_check_finite(out, "layer_norm");
  if (track) {
    Tape<T>::current()->push([x, gamma, beta, out, rows, cols, eps]() mutable {
      const T* px = x.data().data();
      const T* pg = gamma.data().data();
      const T* g = out.grad().data();
      // Row stats are recomputed here rather than stashed at forward time.
      std::vector<T> xhat(static_cast<std::size_t>(rows) * cols);
      std::vector<T> inv_sigma(rows);
      for (int i = 0; i < rows; ++i) {
        const T* xr = px + static_cast<std::size_t>(i) * cols;
        T mean = T(0);
        for (int j = 0; j < cols; ++j) mean += xr[j];
        mean /= static_cast<T>(cols);
        T var = T(0);
        for (int j = 0; j < cols; ++j) var += (xr[j] - mean) * (xr[j] - mean);
        var /= static_cast<T>(cols);
        inv_sigma[i] = T(1) / std::sqrt(var + eps);
        for (int j = 0; j < cols; ++j)
          xhat[static_cast<std::size_t>(i) * cols + j] = (xr[j] - mean) * inv_sigma[i];
      }
      if (gamma.requires_grad()) {
        T* gg = gamma.grad().data();
        for (int j = 0; j < cols; ++j) {
          T acc = T(0);
          for (int i = 0; i < rows; ++i)
            acc += g[static_cast<std::size_t>(i) * cols + j] * xhat[static_cast<std::size_t>(i) * cols + j];
          gg[j] += acc;
        }
      }
      if (beta.requires_grad()) {
        T* gb = beta.grad().data();
        for (int j = 0; j < cols; ++j) {
          T acc = T(0);
          for (int i = 0; i < rows; ++i) acc += g[static_cast<std::size_t>(i) * cols + j];
          gb[j] += acc;
        }
      }
      if (x.requires_grad()) {
        T* gx = x.grad().data();
        for (int i = 0; i < rows; ++i) {
          const T* gr = g + static_cast<std::size_t>(i) * cols;
          const T* xh = xhat.data() + static_cast<std::size_t>(i) * cols;
          T mean_h = T(0), mean_hx = T(0);
          for (int j = 0; j < cols; ++j) {
            const T h = pg[j] * gr[j];
            mean_h += h;
            mean_hx += h * xh[j];
          }
          mean_h /= static_cast<T>(cols);
          mean_hx /= static_cast<T>(cols);
          for (int j = 0; j < cols; ++j)
            gx[static_cast<std::size_t>(i) * cols + j] +=
                inv_sigma[i] * (pg[j] * gr[j] - mean_h - xh[j] * mean_hx);
        }
      }
    });
  }
  return out;
}

/// Cross-correlation conv: input (Cin x H x W), kernels (Cout x Cin x k x k).
template <typename T>
Tensor<T> conv2d(const Tensor<T>& x, const Tensor<T>& kern, int stride, int pad) {
  if (x.ndim() != 3 || kern.ndim() != 4)
    throw std::invalid_argument("conv2d: need (Cin,H,W) input and (Cout,Cin,k,k) kernels, got " +
                                shape_str(x.shape()) + " and " + shape_str(kern.shape()));
  const int Cin = x.dim(0), H = x.dim(1), W = x.dim(2);
  const int Cout = kern.dim(0), k = kern.dim(2);
  if (kern.dim(1) != Cin || kern.dim(3) != k)
    throw std::invalid_argument("conv2d: kernel shape " + shape_str(kern.shape()) +
                                " does not match input " + shape_str(x.shape()));
  if (k % 2 == 0) throw std::invalid_argument("conv2d: kernel size must be odd, got " + std::to_string(k));
  if (stride < 1 || pad < 0) throw std::invalid_argument("conv2d: bad stride/pad");
  const int Ho = (H + 2 * pad - k) / stride + 1;
  const int Wo = (W + 2 * pad - k) / stride + 1;
  if (H + 2 * pad < k || Ho <= 0 || Wo <= 0)
    throw std::invalid_argument("conv2d: non-positive output dims for input " + shape_str(x.shape()) +
                                " kernel " + std::to_string(k) + " stride " + std::to_string(stride) +
                                " pad " + std::to_string(pad));
  const int patch = Cin * k * k;
  std::vector<T> col(static_cast<std::size_t>(patch) * Ho * Wo);
  kernels::im2col(x.data().data(), col.data(), Cin, H, W, k, stride, pad, Ho, Wo);
  const bool track = detail::track_any(x, kern);
  Tensor<T> out = Tensor<T>::zeros({Cout, Ho, Wo}, track);
  kernels::gemm_nn(kern.data().data(), col.data(), out.data().data(), Cout, patch, Ho * Wo);
  debug_check_finite(out, "conv2d");
  if (track) {
    Tape<T>::current()->push(
        [x, kern, out, col = std::move(col), Cin, H, W, Cout, k, stride, pad, Ho, Wo, patch]() mutable {
          const T* g = out.grad().data();
          if (kern.requires_grad())  // dK += dOut * col^T
            kernels::gemm_nt(g, col.data(), kern.grad().data(), Cout, Ho * Wo, patch,
                             /*accumulate=*/true);
          if (x.requires_grad()) {  // dcol = K^T * dOut, scattered back
            std::vector<T> dcol(static_cast<std::size_t>(patch) * Ho * Wo);
            kernels::gemm_tn(kern.data().data(), g, dcol.data(), patch, Cout, Ho * Wo);
            kernels::col2im_add(dcol.data(), x.grad().data(), Cin, H, W, k, stride, pad, Ho, Wo);
          }
        });
  }
  return out;
}

template <typename T>
Tensor<T> add_channel_bias(const Tensor<T>& x, const Tensor<T>& b) {
  if (x.ndim() != 3 || b.size() != x.dim(0))
    throw std::invalid_argument("add_channel_bias: bias " + shape_str(b.shape()) +
                                " does not match channels of " + shape_str(x.shape()));
  const int C = x.dim(0);
  const std::int64_t hw = static_cast<std::int64_t>(x.dim(1)) * x.dim(2);
  const bool track = detail::track_any(x, b);
  Tensor<T> out = Tensor<T>::zeros(x.shape(), track);
  const T* px = x.data().data();
  const T* pb = b.data().data();
  T* po = out.data().data();
  for (int c = 0; c < C; ++c)
    for (std::int64_t i = 0; i < hw; ++i) po[c * hw + i] = px[c * hw + i] + pb[c];
  if (track) {
    Tape<T>::current()->push([x, b, out, C, hw]() mutable {
      const T* g = out.grad().data();
      if (x.requires_grad()) {
        T* gx = x.grad().data();
        const std::int64_t n = x.size();
        for (std::int64_t i = 0; i < n; ++i) gx[i] += g[i];
      }
      if (b.requires_grad()) {
        T* gb = b.grad().data();
        for (int c = 0; c < C; ++c) {
          T acc = T(0);
          for (std::int64_t i = 0; i < hw; ++i) acc += g[c * hw + i];
          gb[c] += acc;
        }
      }
    });
  }
  return out;
}

template <typename T>
Tensor<T> add_row_bias(const Tensor<T>& x, const Tensor<T>& b) {
  if (x.ndim() != 2 || b.size() != x.dim(1))
    throw std::invalid_argument("add_row_bias: bias " + shape_str(b.shape()) +
                                " does not match width of " + shape_str(x.shape()));
  const int rows = x.dim(0), cols = x.dim(1);
  const bool track = detail::track_any(x, b);
  Tensor<T> out = Tensor<T>::zeros(x.shape(), track);
  const T* px = x.data().data();
  const T* pb = b.data().data();
  T* po = out.data().data();
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j)
      po[static_cast<std::size_t>(i) * cols + j] = px[static_cast<std::size_t>(i) * cols + j] + pb[j];
  if (track) {
    Tape<T>::current()->push([x, b, out, rows, cols]() mutable {
      const T* g = out.grad().data();
      if (x.requires_grad()) {
        T* gx = x.grad().data();
        const std::int64_t n = x.size();
        for (std::int64_t i = 0; i < n; ++i) gx[i] += g[i];
      }
      if (b.requires_grad()) {
        T* gb = b.grad().data();
        for (int j = 0; j < cols; ++j) {
          T acc = T(0);
          for (int i = 0; i < rows; ++i) acc += g[static_cast<std::size_t>(i) * cols + j];
          gb[j] += acc;
        }
      }
    });
  }
  return out;
}

/// 2x2 max pooling with stride 2; spatial dims must be even. Ties route the
/// gradient to the first element in scan order.
template <typename T>
Tensor<T> maxpool2x2(const Tensor<T>& x) {
  if (x.ndim() != 3 || x.dim(1) % 2 != 0 || x.dim(2) % 2 != 0)
    throw std::invalid_argument("maxpool2x2: need (C,evenH,evenW), got " + shape_str(x.shape()));
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const int Ho = H / 2, Wo = W / 2;
  const bool track = detail::track_any(x);
  Tensor<T> out = Tensor<T>::zeros({C, Ho, Wo}, track);
  std::vector<std::int32_t> argmax(static_cast<std::size_t>(C) * Ho * Wo);
  const T* px = x.data().data();
  T* po = out.data().data();
#pragma omp parallel for schedule(static) if (C > 1 && static_cast<std::int64_t>(C) * Ho * Wo > 4096)
  for (int c = 0; c < C; ++c)
    for (int oy = 0; oy < Ho; ++oy)
      for (int ox = 0; ox < Wo; ++ox) {
        T best = -std::numeric_limits<T>::infinity();
        std::int32_t best_idx = 0;
        for (int dy = 0; dy < 2; ++dy)
          for (int dx = 0; dx < 2; ++dx) {
            const std::int32_t idx =
                static_cast<std::int32_t>((static_cast<std::size_t>(c) * H + oy * 2 + dy) * W + ox * 2 + dx);
            if (px[idx] > best) {
              best = px[idx];
              best_idx = idx;
            }
          }
        const std::size_t o = (static_cast<std::size_t>(c) * Ho + oy) * Wo + ox;
        po[o] = best;
        argmax[o] = best_idx;
      }
  if (track) {
    Tape<T>::current()->push([x, out, argmax = std::move(argmax)]() mutable {
      const T* g = out.grad().data();
      T* gx = x.grad().data();
      const std::int64_t n = out.size();
      for (std::int64_t i = 0; i < n; ++i) gx[argmax[i]] += g[i];
    });
  }
  return out;
}

template <typename T>
Tensor<T> upsample_nn2x(const Tensor<T>& x) {
  if (x.ndim() != 3) throw std::invalid_argument("upsample_nn2x: need (C,H,W), got " + shape_str(x.shape()));
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  const bool track = detail::track_any(x);
  Tensor<T> out = Tensor<T>::zeros({C, 2 * H, 2 * W}, track);
  const T* px = x.data().data();
  T* po = out.data().data();
#pragma omp parallel for schedule(static) if (C > 1 && x.size() > 4096)
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < 2 * H; ++y)
      for (int xx = 0; xx < 2 * W; ++xx)
        po[(static_cast<std::size_t>(c) * 2 * H + y) * 2 * W + xx] =
            px[(static_cast<std::size_t>(c) * H + y / 2) * W + xx / 2];
  if (track) {
    Tape<T>::current()->push([x, out, C, H, W]() mutable {
      const T* g = out.grad().data();
      T* gx = x.grad().data();
      for (int c = 0; c < C; ++c)
        for (int y = 0; y < 2 * H; ++y)
          for (int xx = 0; xx < 2 * W; ++xx)
            gx[(static_cast<std::size_t>(c) * H + y / 2) * W + xx / 2] +=
                g[(static_cast<std::size_t>(c) * 2 * H + y) * 2 * W + xx];
    });
  }
  return out;
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
  const bool track = detail::track_any(x);
  Tensor<T> out = Tensor<T>::from({1}, {kernels::sum_serial(x.data().data(), x.size())}, track);
  if (track) {
    Tape<T>::current()->push([x, out]() mutable {
      const T g = out.grad()[0];
      T* gx = x.grad().data();
      const std::int64_t n = x.size();
      for (std::int64_t i = 0; i < n; ++i) gx[i] += g;
    });
  }
  return out;
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
  return mul_scalar(sum_all(x), T(1) / static_cast<T>(x.size()));
}

/// Max over all elements; subgradient flows to the first argmax.
template <typename T>
Tensor<T> max_all(const Tensor<T>& x) {
  const T* px = x.data().data();
  std::int64_t best = 0;
  for (std::int64_t i = 1; i < x.size(); ++i)
    if (px[i] > px[best]) best = i;
  const bool track = detail::track_any(x);
  Tensor<T> out = Tensor<T>::from({1}, {px[best]}, track);
  if (track) {
    Tape<T>::current()->push([x, out, best]() mutable { x.grad()[best] += out.grad()[0]; });
  }
  return out;
}

/// Pads on the bottom/right with reflected rows/columns (no edge repeat).
template <typename T>
Tensor<T> pad_reflect_bottom_right(const Tensor<T>& x, int pad_h, int pad_w) {
  if (x.ndim() != 3) throw std::invalid_argument("pad_reflect: need (C,H,W), got " + shape_str(x.shape()));
  const int C = x.dim(0), H = x.dim(1), W = x.dim(2);
  if (pad_h >= H || pad_w >= W)
    throw std::invalid_argument("pad_reflect: padding exceeds input dims " + shape_str(x.shape()));
  if (pad_h == 0 && pad_w == 0) return x;
  const int Ho = H + pad_h, Wo = W + pad_w;
  auto src_index = [](int v, int n) { return v < n ? v : 2 * n - 2 - v; };
  const bool track = detail::track_any(x);
  Tensor<T> out = Tensor<T>::zeros({C, Ho, Wo}, track);
  const T* px = x.data().data();
  T* po = out.data().data();
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < Ho; ++y)
      for (int xx = 0; xx < Wo; ++xx)
        po[(static_cast<std::size_t>(c) * Ho + y) * Wo + xx] =
            px[(static_cast<std::size_t>(c) * H + src_index(y, H)) * W + src_index(xx, W)];
  if (track) {
    Tape<T>::current()->push([x, out, C, H, W, Ho, Wo, src_index]() mutable {
      const T* g = out.grad().data();
      T* gx = x.grad().data();
      for (int c = 0; c < C; ++c)
        for (int y = 0; y < Ho; ++y)
          for (int xx = 0; xx < Wo; ++xx)
            gx[(static_cast<std::size_t>(c) * H + src_index(y, H)) * W + src_index(xx, W)] +=
                g[(static_cast<std::size_t>(c) * Ho + y) * Wo + xx];
    });
  }
  return out;
}

}  // namespace oscount
