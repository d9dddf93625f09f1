#pragma once

#include <array>
#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "oscount/attention.hpp"
#include "oscount/features.hpp"
#include "oscount/ops.hpp"

namespace oscount {

/// Non-negative (H_d x W_d) grid whose sum is the count. `scale` is the
/// ratio of density-grid cells to image pixels.
template <typename T>
struct DensityMap {
  Tensor<T> values;
  double scale = 1.0;

  T count() const { return kernels::sum_serial(values.data().data(), values.size()); }
};

struct LossConfig {
  double lambda = 1e-4;
  int ssim_window = 11;
  double ssim_sigma = 1.5;
  double ssim_c1 = 0.01 * 0.01;
  double ssim_c2 = 0.03 * 0.03;
  double gt_sigma = 2.0;
};

/// Density head: upsample x2 then conv3x3-relu, conv3x3-relu, conv1x1-relu.
/// The trailing relu hard-enforces a non-negative map. The last layer starts
/// with damped weights and a small positive bias: the initial map then sums
/// to roughly the ground-truth scale with about half its cells alive. A zero
/// start risks an all-dead final relu (no gradient at all), a large start
/// pushes every cell negative in the first epochs; both freeze training.
template <typename T>
struct RegressorParams {
  ConvLayerParams<T> c1, c2, c3;

  static RegressorParams init(int d, Rng& rng) {
    const int mid1 = 32, mid2 = 16;
    RegressorParams p{ConvLayerParams<T>::init(mid1, d, 3, rng),
                      ConvLayerParams<T>::init(mid2, mid1, 3, rng),
                      ConvLayerParams<T>::init(1, mid2, 1, rng)};
    for (auto& v : p.c1.bias.data()) v = T(0.01);
    for (auto& v : p.c2.bias.data()) v = T(0.01);
    for (auto& v : p.c3.kernels.data()) v = T(0.1) * v;
    for (auto& v : p.c3.bias.data()) v = T(0.01);
    return p;
  }
};

template <typename T>
DensityMap<T> regress_density(const FeatureSequence<T>& x_star, int h_l, int w_l,
                              const RegressorParams<T>& params, double scale) {
  if (x_star.length() != h_l * w_l)
    throw std::invalid_argument("regress_density: " + std::to_string(x_star.length()) +
                                " tokens do not tile a " + std::to_string(h_l) + "x" +
                                std::to_string(w_l) + " grid");
  const int d = x_star.width();
  Tensor<T> grid = reshape(transpose2d(x_star.tokens), {d, h_l, w_l});
  grid = upsample_nn2x(grid);
  grid = relu(add_channel_bias(conv2d(grid, params.c1.kernels, 1, 1), params.c1.bias));
  grid = relu(add_channel_bias(conv2d(grid, params.c2.kernels, 1, 1), params.c2.bias));
  grid = relu(add_channel_bias(conv2d(grid, params.c3.kernels, 1, 0), params.c3.bias));
  return {reshape(grid, {2 * h_l, 2 * w_l}), scale};
}

/// Rasterizes point annotations as unit-mass Gaussians on the density grid.
/// Each kernel is truncated at radius 4*sigma and renormalized over its
/// in-bounds cells, so the total mass equals the point count exactly even at
/// borders. Point coordinates are image pixels; `scale` maps them onto the
/// grid.
template <typename T>
DensityMap<T> gt_density_from_points(const std::vector<std::array<double, 2>>& points, int grid_h,
                                     int grid_w, double scale, double sigma,
                                     const std::string& sample_id = "") {
  const double img_w = grid_w / scale, img_h = grid_h / scale;
  Tensor<T> map = Tensor<T>::zeros({grid_h, grid_w});
  T* cells = map.data().data();
  const int radius = static_cast<int>(std::ceil(4.0 * sigma));
  for (const auto& p : points) {
    const double px = p[0], py = p[1];
    if (px < 0.0 || px >= img_w || py < 0.0 || py >= img_h)
      throw std::invalid_argument("point (" + std::to_string(px) + "," + std::to_string(py) +
                                  ") outside image" +
                                  (sample_id.empty() ? "" : " in sample " + sample_id));
    const double gx = (px + 0.5) * scale - 0.5;
    const double gy = (py + 0.5) * scale - 0.5;
    const int cx = static_cast<int>(std::lround(gx));
    const int cy = static_cast<int>(std::lround(gy));
    std::vector<std::pair<std::size_t, double>> weights;
    double total = 0.0;
    for (int r = std::max(cy - radius, 0); r <= std::min(cy + radius, grid_h - 1); ++r)
      for (int c = std::max(cx - radius, 0); c <= std::min(cx + radius, grid_w - 1); ++c) {
        const double dy = r - gy, dx = c - gx;
        const double w = std::exp(-(dx * dx + dy * dy) / (2.0 * sigma * sigma));
        weights.emplace_back(static_cast<std::size_t>(r) * grid_w + c, w);
        total += w;
      }
    for (const auto& [idx, w] : weights) cells[idx] += static_cast<T>(w / total);
  }
  return {map, scale};
}

/// Squared L2 distance over all cells.
template <typename T>
Tensor<T> euclidean_loss(const DensityMap<T>& d, const DensityMap<T>& gt) {
  if (d.values.shape() != gt.values.shape())
    throw std::invalid_argument("euclidean_loss: shape mismatch " + shape_str(d.values.shape()) +
                                " vs " + shape_str(gt.values.shape()));
  const Tensor<T> diff = sub(d.values, gt.values);
  return sum_all(mul(diff, diff));
}

namespace detail {

template <typename T>
Tensor<T> gaussian_window(int size, double sigma) {
  Tensor<T> w = Tensor<T>::zeros({1, 1, size, size});
  const double c = (size - 1) / 2.0;
  double total = 0.0;
  for (int y = 0; y < size; ++y)
    for (int x = 0; x < size; ++x) {
      const double v = std::exp(-((y - c) * (y - c) + (x - c) * (x - c)) / (2.0 * sigma * sigma));
      w.data()[static_cast<std::size_t>(y) * size + x] = static_cast<T>(v);
      total += v;
    }
  for (auto& v : w.data()) v = static_cast<T>(v / total);
  return w;
}

}  // namespace detail

/// 1 - mean local SSIM under a Gaussian window (valid positions only). Both
/// maps are first normalized by their joint maximum since densities are not
/// bounded like 8-bit images; the normalizer participates in the gradient.
template <typename T>
Tensor<T> ssim_loss(const DensityMap<T>& d, const DensityMap<T>& gt, const LossConfig& cfg) {
  if (d.values.shape() != gt.values.shape())
    throw std::invalid_argument("ssim_loss: shape mismatch " + shape_str(d.values.shape()) +
                                " vs " + shape_str(gt.values.shape()));
  if (cfg.ssim_window % 2 == 0) throw std::invalid_argument("ssim_loss: window must be odd");
  const int H = d.values.dim(0), W = d.values.dim(1);
  if (H < cfg.ssim_window || W < cfg.ssim_window)
    throw std::invalid_argument("ssim_loss: map " + shape_str(d.values.shape()) +
                                " smaller than window " + std::to_string(cfg.ssim_window));
  const Tensor<T> win = detail::gaussian_window<T>(cfg.ssim_window, cfg.ssim_sigma);
  const Tensor<T> norm =
      maximum(maximum(max_all(d.values), max_all(gt.values)), Tensor<T>::scalar(T(1e-8)));
  const Tensor<T> x = reshape(div(d.values, norm), {1, H, W});
  const Tensor<T> y = reshape(div(gt.values, norm), {1, H, W});
  auto blur = [&](const Tensor<T>& t) { return conv2d(t, win, 1, 0); };
  const Tensor<T> mu_x = blur(x);
  const Tensor<T> mu_y = blur(y);
  const Tensor<T> mu_xx = mul(mu_x, mu_x);
  const Tensor<T> mu_yy = mul(mu_y, mu_y);
  const Tensor<T> mu_xy = mul(mu_x, mu_y);
  const Tensor<T> sigma_x = sub(blur(mul(x, x)), mu_xx);
  const Tensor<T> sigma_y = sub(blur(mul(y, y)), mu_yy);
  const Tensor<T> sigma_xy = sub(blur(mul(x, y)), mu_xy);
  const Tensor<T> c1 = Tensor<T>::scalar(static_cast<T>(cfg.ssim_c1));
  const Tensor<T> c2 = Tensor<T>::scalar(static_cast<T>(cfg.ssim_c2));
  const Tensor<T> num = mul(add(mul_scalar(mu_xy, T(2)), c1), add(mul_scalar(sigma_xy, T(2)), c2));
  const Tensor<T> den = mul(add(add(mu_xx, mu_yy), c1), add(add(sigma_x, sigma_y), c2));
  const Tensor<T> ssim_map = div(num, den);
  return sub(Tensor<T>::scalar(T(1)), mean_all(ssim_map));
}

/// Euclidean + lambda * SSIM (Euclidean alone when lambda is 0).
template <typename T>
Tensor<T> total_loss(const DensityMap<T>& d, const DensityMap<T>& gt, const LossConfig& cfg) {
  Tensor<T> loss = euclidean_loss(d, gt);
  if (cfg.lambda != 0.0)
    loss = add(loss, mul_scalar(ssim_loss(d, gt, cfg), static_cast<T>(cfg.lambda)));
  return loss;
}

}  // namespace oscount
