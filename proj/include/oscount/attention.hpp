#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "oscount/ops.hpp"
#include "oscount/rng.hpp"
#include "oscount/tensor.hpp"

namespace oscount {

/// Token position descriptor: (pyramid level, grid cell, stride of that
/// level in fine-grid units). Lets tokens from different scales agree on a
/// position when they cover the same image location.
struct TokenPos {
  int level = 0;
  int y = 0;
  int x = 0;
  int stride = 1;
};

/// (L x d) token matrix plus per-token positions. `extent` is the width of
/// the source image in fine-grid units; position embeddings linearize
/// (y*stride, x*stride) against it.
template <typename T>
struct FeatureSequence {
  Tensor<T> tokens;
  std::vector<TokenPos> positions;
  int extent = 0;

  int length() const { return tokens.dim(0); }
  int width() const { return tokens.dim(1); }
};

struct CorrelationConfig {
  int heads = 4;
  int cycles = 2;
  bool use_pe = true;
  int ffn_hidden = 0;  // 0 -> 2*d
  double ln_eps = 1e-5;

  int ffn_width(int d) const { return ffn_hidden > 0 ? ffn_hidden : 2 * d; }
};

/// One head's projections, each d x (d/h).
template <typename T>
struct HeadProjection {
  Tensor<T> wq, wk, wv;
};

template <typename T>
struct AttentionWeights {
  std::vector<HeadProjection<T>> heads;
  Tensor<T> wo;  // d x d
  int d = 0;

  static AttentionWeights init(int d, int h, Rng& rng) {
    if (h < 1 || d % h != 0)
      throw std::invalid_argument("attention: model width " + std::to_string(d) +
                                  " not divisible by head count " + std::to_string(h));
    AttentionWeights w;
    w.d = d;
    const int dh = d / h;
    const double bound = 1.0 / std::sqrt(static_cast<double>(d));
    auto mat = [&](int rows, int cols) {
      Tensor<T> t = Tensor<T>::zeros({rows, cols}, /*requires_grad=*/true);
      for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
      return t;
    };
    for (int i = 0; i < h; ++i) w.heads.push_back({mat(d, dh), mat(d, dh), mat(d, dh)});
    w.wo = mat(d, d);
    return w;
  }
};

/// Test hook: when armed, every attention op pushes its softmax matrix here
/// so invariants over the attention weights can be checked from outside.
template <typename T>
struct AttentionProbe {
  static std::vector<Tensor<T>>*& sink() {
    static thread_local std::vector<Tensor<T>>* s = nullptr;
    return s;
  }
};

/// Single-head scaled dot-product attention:
/// softmax((q Wq)(k Wk)^T / sqrt(d_head)) (v Wv). Position embeddings are
/// added to the token inputs upstream, never to the logit matrix.
template <typename T>
Tensor<T> scaled_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                           const HeadProjection<T>& w) {
  if (k.dim(0) != v.dim(0))
    throw std::invalid_argument("scaled_attention: key/value lengths differ, " +
                                shape_str(k.shape()) + " vs " + shape_str(v.shape()));
  const int dh = w.wq.dim(1);
  const Tensor<T> qp = matmul(q, w.wq);
  const Tensor<T> kp = matmul(k, w.wk);
  const Tensor<T> vp = matmul(v, w.wv);
  const T scale = T(1) / std::sqrt(static_cast<T>(dh));
  const Tensor<T> logits = mul_scalar(matmul(qp, transpose2d(kp)), scale);
  const Tensor<T> attn = softmax_rows(logits);
  if (AttentionProbe<T>::sink()) AttentionProbe<T>::sink()->push_back(attn);
  return matmul(attn, vp);
}

/// Concat(head_1..head_h) Wo.
template <typename T>
Tensor<T> multi_head_attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v,
                               const AttentionWeights<T>& w) {
  std::vector<Tensor<T>> heads;
  heads.reserve(w.heads.size());
  for (const auto& head : w.heads) heads.push_back(scaled_attention(q, k, v, head));
  return matmul(concat_cols(heads), w.wo);
}

template <typename T>
struct LayerNormParams {
  Tensor<T> gamma, beta;

  static LayerNormParams init(int d) {
    return {Tensor<T>::full({d}, T(1), true), Tensor<T>::zeros({d}, true)};
  }
};

template <typename T>
struct SelfAttentionParams {
  AttentionWeights<T> ma;
  LayerNormParams<T> ln;

  static SelfAttentionParams init(int d, int h, Rng& rng) {
    return {AttentionWeights<T>::init(d, h, rng), LayerNormParams<T>::init(d)};
  }
};

template <typename T>
struct FfnParams {
  Tensor<T> w1, b1, w2, b2;

  static FfnParams init(int d, int hidden, Rng& rng) {
    auto mat = [&](int rows, int cols) {
      const double bound = 1.0 / std::sqrt(static_cast<double>(rows));
      Tensor<T> t = Tensor<T>::zeros({rows, cols}, true);
      for (auto& v : t.data()) v = static_cast<T>(rng.uniform(-bound, bound));
      return t;
    };
    return {mat(d, hidden), Tensor<T>::zeros({hidden}, true), mat(hidden, d),
            Tensor<T>::zeros({d}, true)};
  }
};

template <typename T>
struct CorrelativeAttentionParams {
  AttentionWeights<T> ma;
  LayerNormParams<T> ln1, ln2;
  FfnParams<T> ffn;

  static CorrelativeAttentionParams init(int d, int h, int hidden, Rng& rng) {
    return {AttentionWeights<T>::init(d, h, rng), LayerNormParams<T>::init(d),
            LayerNormParams<T>::init(d), FfnParams<T>::init(d, hidden, rng)};
  }
};

/// LN(MA(x,x,x) + x).
template <typename T>
Tensor<T> self_attention_block(const Tensor<T>& x, const SelfAttentionParams<T>& p, T eps) {
  const Tensor<T> ma = multi_head_attention(x, x, x, p.ma);
  return layer_norm(add(ma, x), p.ln.gamma, p.ln.beta, eps);
}

/// Correlates query tokens against support tokens:
/// u = LN1(MA(x, s, s) + x); out = LN2(u + FFN(u)), FFN = affine-relu-affine.
template <typename T>
Tensor<T> correlative_attention_block(const Tensor<T>& x, const Tensor<T>& s,
                                      const CorrelativeAttentionParams<T>& p, T eps) {
  if (x.dim(1) != s.dim(1))
    throw std::invalid_argument("correlative_attention: feature widths differ, " +
                                shape_str(x.shape()) + " vs " + shape_str(s.shape()));
  const Tensor<T> ma = multi_head_attention(x, s, s, p.ma);
  const Tensor<T> u = layer_norm(add(ma, x), p.ln1.gamma, p.ln1.beta, eps);
  const Tensor<T> hidden = relu(add_row_bias(matmul(u, p.ffn.w1), p.ffn.b1));
  const Tensor<T> ffn_out = add_row_bias(matmul(hidden, p.ffn.w2), p.ffn.b2);
  return layer_norm(add(u, ffn_out), p.ln2.gamma, p.ln2.beta, eps);
}

/// Parameters for one correlation cycle; cycles do not share weights.
template <typename T>
struct CorrelationCycleParams {
  SelfAttentionParams<T> sa_x, sa_s;
  CorrelativeAttentionParams<T> corr;

  static CorrelationCycleParams init(int d, int h, int hidden, Rng& rng) {
    return {SelfAttentionParams<T>::init(d, h, rng), SelfAttentionParams<T>::init(d, h, rng),
            CorrelativeAttentionParams<T>::init(d, h, hidden, rng)};
  }
};

template <typename T>
struct CorrelationParams {
  std::vector<CorrelationCycleParams<T>> cycles;

  static CorrelationParams init(const CorrelationConfig& cfg, int d, Rng& rng) {
    if (cfg.cycles < 1) throw std::invalid_argument("correlation: cycle count must be >= 1");
    CorrelationParams p;
    for (int t = 0; t < cfg.cycles; ++t)
      p.cycles.push_back(CorrelationCycleParams<T>::init(d, cfg.heads, cfg.ffn_width(d), rng));
    return p;
  }
};

/// T cycles of (self-attention on x, self-attention on s, correlative
/// attention of x onto s); both refined sequences feed the next cycle.
/// The self-attention stages can be disabled independently for ablations.
template <typename T>
std::pair<FeatureSequence<T>, FeatureSequence<T>> feature_correlation(
    const FeatureSequence<T>& x, const FeatureSequence<T>& s, const CorrelationConfig& cfg,
    const CorrelationParams<T>& params, bool enable_sa_x = true, bool enable_sa_s = true) {
  if (static_cast<int>(params.cycles.size()) != cfg.cycles)
    throw std::invalid_argument("correlation: parameter set has " +
                                std::to_string(params.cycles.size()) + " cycles, config wants " +
                                std::to_string(cfg.cycles));
  const T eps = static_cast<T>(cfg.ln_eps);
  Tensor<T> xt = x.tokens;
  Tensor<T> st = s.tokens;
  for (const auto& cycle : params.cycles) {
    if (enable_sa_x) xt = self_attention_block(xt, cycle.sa_x, eps);
    if (enable_sa_s) st = self_attention_block(st, cycle.sa_s, eps);
    xt = correlative_attention_block(xt, st, cycle.corr, eps);
  }
  FeatureSequence<T> x_out{xt, x.positions, x.extent};
  FeatureSequence<T> s_out{st, s.positions, s.extent};
  return {x_out, s_out};
}

}  // namespace oscount
