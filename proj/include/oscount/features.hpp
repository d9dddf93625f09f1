#pragma once

#include <cmath>
#include <iostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "oscount/attention.hpp"
#include "oscount/ops.hpp"
#include "oscount/rng.hpp"

namespace oscount {

/// Conv stack: each stage is `convs_per_stage` 3x3 conv+relu layers followed
/// by a 2x2 max-pool, so level j carries stride 2^j. Inputs whose dims are
/// not multiples of the total stride are reflect-padded (bottom/right) by
/// default, or rejected when `reject_indivisible` is set.
struct BackboneSpec {
  std::vector<int> channels{16, 32, 64};
  int convs_per_stage = 2;
  int out_dim = 64;
  bool reject_indivisible = false;

  int levels() const { return static_cast<int>(channels.size()); }
  int total_stride() const { return 1 << levels(); }
};

/// Pixel box, inclusive-exclusive: [x0, x1) x [y0, y1).
struct SupportBox {
  int x0 = 0, y0 = 0, x1 = 0, y1 = 0;

  int width() const { return x1 - x0; }
  int height() const { return y1 - y0; }
};

struct ScaleAggregationConfig {
  int delta = 2;
  int support_resize = 32;
};

template <typename T>
struct ConvLayerParams {
  Tensor<T> kernels, bias;

  static ConvLayerParams init(int cout, int cin, int k, Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(cin * k * k));
    Tensor<T> kern = Tensor<T>::zeros({cout, cin, k, k}, true);
    for (auto& v : kern.data()) v = static_cast<T>(rng.uniform(-bound, bound));
    return {kern, Tensor<T>::zeros({cout}, true)};
  }
};

/// Backbone weights plus the per-level 1x1 projections to the common token
/// width. Projections exist only for the levels that are actually consumed:
/// the top `delta` levels (the query path uses the last one).
template <typename T>
struct BackboneParams {
  std::vector<std::vector<ConvLayerParams<T>>> stages;
  std::vector<ConvLayerParams<T>> proj;  // proj[i] serves level (levels - delta + 1 + i)
  int proj_first_level = 0;

  static BackboneParams init(const BackboneSpec& spec, int delta, Rng& rng) {
    if (spec.levels() < 2) throw std::invalid_argument("backbone: need at least 2 stages");
    if (delta < 1 || delta > spec.levels())
      throw std::invalid_argument("backbone: delta " + std::to_string(delta) +
                                  " outside [1, " + std::to_string(spec.levels()) + "]");
    BackboneParams p;
    int cin = 3;
    for (int chan : spec.channels) {
      std::vector<ConvLayerParams<T>> stage;
      for (int c = 0; c < spec.convs_per_stage; ++c) {
        stage.push_back(ConvLayerParams<T>::init(chan, cin, 3, rng));
        cin = chan;
      }
      p.stages.push_back(std::move(stage));
    }
    p.proj_first_level = spec.levels() - delta + 1;
    for (int level = p.proj_first_level; level <= spec.levels(); ++level)
      p.proj.push_back(ConvLayerParams<T>::init(spec.out_dim, spec.channels[level - 1], 1, rng));
    return p;
  }

  const ConvLayerParams<T>& projection_for_level(int level) const {
    const int idx = level - proj_first_level;
    if (idx < 0 || idx >= static_cast<int>(proj.size()))
      throw std::invalid_argument("backbone: no projection for level " + std::to_string(level));
    return proj[static_cast<std::size_t>(idx)];
  }
};

/// Runs all stages; returns per-level maps (level j at index j-1).
template <typename T>
std::vector<Tensor<T>> backbone_forward(const Tensor<T>& image, const BackboneParams<T>& params) {
  Tensor<T> cur = image;
  std::vector<Tensor<T>> levels;
  for (const auto& stage : params.stages) {
    for (const auto& layer : stage)
      cur = relu(add_channel_bias(conv2d(cur, layer.kernels, 1, 1), layer.bias));
    cur = maxpool2x2(cur);
    levels.push_back(cur);
  }
  return levels;
}

/// Pads to the backbone's stride multiple (reflect, bottom/right) or throws
/// when the spec demands exact dims.
template <typename T>
Tensor<T> pad_to_stride(const Tensor<T>& image, const BackboneSpec& spec) {
  const int stride = spec.total_stride();
  const int H = image.dim(1), W = image.dim(2);
  const int ph = (stride - H % stride) % stride;
  const int pw = (stride - W % stride) % stride;
  if (ph == 0 && pw == 0) return image;
  if (spec.reject_indivisible)
    throw std::invalid_argument("backbone: image dims " + shape_str(image.shape()) +
                                " not a multiple of stride " + std::to_string(stride));
  return pad_reflect_bottom_right(image, ph, pw);
}

/// 1x1-projects a (C x h x w) map to d channels and flattens it row-major to
/// (h*w x d) tokens, token index y*w + x.
template <typename T>
Tensor<T> project_and_flatten(const Tensor<T>& map, const ConvLayerParams<T>& proj) {
  const Tensor<T> projected = add_channel_bias(conv2d(map, proj.kernels, 1, 0), proj.bias);
  const int d = projected.dim(0);
  const int hw = projected.dim(1) * projected.dim(2);
  return transpose2d(reshape(projected, {d, hw}));
}

/// Query tokens: last backbone level, projected and flattened. Token
/// positions live on the image pixel grid so they stay comparable across
/// scales.
template <typename T>
FeatureSequence<T> extract_query_features(const Tensor<T>& image, const BackboneParams<T>& params,
                                          const BackboneSpec& spec) {
  const Tensor<T> padded = pad_to_stride(image, spec);
  const std::vector<Tensor<T>> levels = backbone_forward(padded, params);
  const int l = spec.levels();
  const Tensor<T>& last = levels.back();
  const int h = last.dim(1), w = last.dim(2), stride = 1 << l;
  FeatureSequence<T> seq;
  seq.tokens = project_and_flatten(last, params.projection_for_level(l));
  seq.extent = padded.dim(2);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) seq.positions.push_back({l, y, x, stride});
  return seq;
}

/// Bilinear resample of a (C x H x W) image to (C x outH x outW). Pure pixel
/// helper for untracked images; not recorded on the tape.
template <typename T>
Tensor<T> bilinear_resize(const Tensor<T>& image, int out_h, int out_w) {
  const int C = image.dim(0), H = image.dim(1), W = image.dim(2);
  if (out_h == H && out_w == W) return image.clone_detached();
  Tensor<T> out = Tensor<T>::zeros({C, out_h, out_w});
  const T* src = image.data().data();
  T* dst = out.data().data();
  const double sy = static_cast<double>(H) / out_h;
  const double sx = static_cast<double>(W) / out_w;
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < out_h; ++y) {
      const double fy = std::min(std::max((y + 0.5) * sy - 0.5, 0.0), static_cast<double>(H - 1));
      const int y0 = static_cast<int>(fy);
      const int y1 = std::min(y0 + 1, H - 1);
      const double wy = fy - y0;
      for (int x = 0; x < out_w; ++x) {
        const double fx = std::min(std::max((x + 0.5) * sx - 0.5, 0.0), static_cast<double>(W - 1));
        const int x0 = static_cast<int>(fx);
        const int x1 = std::min(x0 + 1, W - 1);
        const double wx = fx - x0;
        const double v00 = src[(static_cast<std::size_t>(c) * H + y0) * W + x0];
        const double v01 = src[(static_cast<std::size_t>(c) * H + y0) * W + x1];
        const double v10 = src[(static_cast<std::size_t>(c) * H + y1) * W + x0];
        const double v11 = src[(static_cast<std::size_t>(c) * H + y1) * W + x1];
        dst[(static_cast<std::size_t>(c) * out_h + y) * out_w + x] = static_cast<T>(
            (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11));
      }
    }
  return out;
}

/// Clips the box to the image, warning on stderr if it overhangs; throws on
/// a degenerate (empty) box.
template <typename T>
SupportBox clip_box(const SupportBox& box, const Tensor<T>& image) {
  const int H = image.dim(1), W = image.dim(2);
  SupportBox c{std::max(box.x0, 0), std::max(box.y0, 0), std::min(box.x1, W), std::min(box.y1, H)};
  if (c.x0 != box.x0 || c.y0 != box.y0 || c.x1 != box.x1 || c.y1 != box.y1)
    std::cerr << "warning: support box [" << box.x0 << "," << box.y0 << "," << box.x1 << ","
              << box.y1 << "] clipped to image " << W << "x" << H << "\n";
  if (c.width() < 1 || c.height() < 1)
    throw std::invalid_argument("support box degenerate after clipping: [" +
                                std::to_string(box.x0) + "," + std::to_string(box.y0) + "," +
                                std::to_string(box.x1) + "," + std::to_string(box.y1) + "]");
  return c;
}

template <typename T>
Tensor<T> crop_image(const Tensor<T>& image, const SupportBox& box) {
  const int C = image.dim(0), W = image.dim(2);
  Tensor<T> out = Tensor<T>::zeros({C, box.height(), box.width()});
  const T* src = image.data().data();
  T* dst = out.data().data();
  for (int c = 0; c < C; ++c)
    for (int y = 0; y < box.height(); ++y)
      for (int x = 0; x < box.width(); ++x)
        dst[(static_cast<std::size_t>(c) * box.height() + y) * box.width() + x] =
            src[(static_cast<std::size_t>(c) * image.dim(1) + box.y0 + y) * W + box.x0 + x];
  return out;
}

/// Support tokens with scale aggregation: crop the box, resize to
/// support_resize^2, run the backbone and concatenate the flattened top
/// `delta` level maps along the token axis, coarsest level first.
template <typename T>
FeatureSequence<T> extract_support_features(const Tensor<T>& image, const SupportBox& box,
                                            const ScaleAggregationConfig& cfg,
                                            const BackboneParams<T>& params,
                                            const BackboneSpec& spec) {
  const SupportBox clipped = clip_box(box, image);
  const Tensor<T> crop = crop_image(image, clipped);
  const Tensor<T> resized = bilinear_resize(crop, cfg.support_resize, cfg.support_resize);
  const std::vector<Tensor<T>> levels = backbone_forward(pad_to_stride(resized, spec), params);
  const int l = spec.levels();
  if (cfg.delta < 1 || cfg.delta > l)
    throw std::invalid_argument("scale aggregation: delta " + std::to_string(cfg.delta) +
                                " outside [1, " + std::to_string(l) + "]");
  FeatureSequence<T> seq;
  seq.extent = cfg.support_resize;
  std::vector<Tensor<T>> parts;
  for (int level = l; level >= l + 1 - cfg.delta; --level) {
    const Tensor<T>& map = levels[static_cast<std::size_t>(level - 1)];
    parts.push_back(project_and_flatten(map, params.projection_for_level(level)));
    const int stride = 1 << level;
    for (int y = 0; y < map.dim(1); ++y)
      for (int x = 0; x < map.dim(2); ++x) seq.positions.push_back({level, y, x, stride});
  }
  seq.tokens = concat_rows(parts);
  return seq;
}

/// Fixed sinusoidal embedding: dim 2i = sin(pos/10000^(2i/d)),
/// dim 2i+1 = cos(pos/10000^(2i/d)).
template <typename T>
std::vector<T> sinusoidal_pe(double pos, int d) {
  if (d % 2 != 0)
    throw std::invalid_argument("sinusoidal_pe: dimension must be even, got " + std::to_string(d));
  std::vector<T> pe(static_cast<std::size_t>(d));
  for (int i = 0; i < d / 2; ++i) {
    const double freq = std::pow(10000.0, 2.0 * i / d);
    pe[static_cast<std::size_t>(2 * i)] = static_cast<T>(std::sin(pos / freq));
    pe[static_cast<std::size_t>(2 * i + 1)] = static_cast<T>(std::cos(pos / freq));
  }
  return pe;
}

/// Scalar position of a token: its covering cell linearized on the fine
/// (pixel) grid, so the same physical location gets the same pos at every
/// scale. Exact integer arithmetic.
inline std::int64_t token_position(const TokenPos& p, int extent) {
  return static_cast<std::int64_t>(p.y) * p.stride * extent +
         static_cast<std::int64_t>(p.x) * p.stride;
}

/// Adds the sinusoidal embedding of each token's position to its features.
/// With `enabled == false` the sequence passes through untouched.
template <typename T>
FeatureSequence<T> attach_pe(const FeatureSequence<T>& seq, bool enabled) {
  if (!enabled) return seq;
  const int L = seq.length(), d = seq.width();
  Tensor<T> pe = Tensor<T>::zeros({L, d});
  for (int i = 0; i < L; ++i) {
    const std::vector<T> row =
        sinusoidal_pe<T>(static_cast<double>(token_position(seq.positions[static_cast<std::size_t>(i)], seq.extent)), d);
    std::copy(row.begin(), row.end(), pe.data().begin() + static_cast<std::size_t>(i) * d);
  }
  return {add(seq.tokens, pe), seq.positions, seq.extent};
}

}  // namespace oscount
