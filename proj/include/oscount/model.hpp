#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "oscount/attention.hpp"
#include "oscount/density.hpp"
#include "oscount/features.hpp"
#include "oscount/rng.hpp"

namespace oscount {

/// Every architecture and training knob in one place. Ablation flags turn
/// blocks off at forward time; the parameter set is always the full nominal
/// structure so arms sharing a seed share their initialization.
struct ModelConfig {
  int d = 64;
  int heads = 4;
  int cycles = 2;
  int delta = 2;
  double lambda = 1e-4;
  std::vector<int> backbone_channels{16, 32, 64};
  int convs_per_stage = 2;
  int support_resize = 32;
  int ffn_hidden = 0;  // 0 -> 2*d
  double ln_eps = 1e-5;
  bool use_pe = true;
  int ssim_window = 11;
  double ssim_sigma = 1.5;
  double gt_sigma = 2.0;
  double lr = 5e-4;
  int epochs = 12;
  std::uint64_t seed = 1;
  // Ablation switches (true = block enabled).
  bool self_attn_x = true;
  bool self_attn_s = true;
  bool scale_agg = true;
  bool ssim = true;

  int effective_delta() const { return scale_agg ? delta : 1; }
  double effective_lambda() const { return ssim ? lambda : 0.0; }

  LossConfig loss_config() const {
    LossConfig l;
    l.lambda = effective_lambda();
    l.ssim_window = ssim_window;
    l.ssim_sigma = ssim_sigma;
    l.gt_sigma = gt_sigma;
    return l;
  }

  BackboneSpec backbone_spec() const {
    BackboneSpec s;
    s.channels = backbone_channels;
    s.convs_per_stage = convs_per_stage;
    s.out_dim = d;
    return s;
  }

  CorrelationConfig correlation_config() const {
    CorrelationConfig c;
    c.heads = heads;
    c.cycles = cycles;
    c.use_pe = use_pe;
    c.ffn_hidden = ffn_hidden;
    c.ln_eps = ln_eps;
    return c;
  }
};

inline int padded_dim(int v, int stride) { return v + (stride - v % stride) % stride; }

/// The full counting network: backbone + scale aggregation + position
/// embedding + correlation stack + density regressor, with a flat named
/// parameter registry for the optimizer and checkpoints.
template <typename T>
class CountingModel {
 public:
  explicit CountingModel(const ModelConfig& cfg)
      : cfg_(cfg), spec_(cfg.backbone_spec()), corr_cfg_(cfg.correlation_config()) {
    Rng rng = Rng(cfg.seed).derive(0);
    backbone_ = BackboneParams<T>::init(spec_, cfg.delta, rng);
    corr_ = CorrelationParams<T>::init(corr_cfg_, cfg.d, rng);
    reg_ = RegressorParams<T>::init(cfg.d, rng);
    build_registry();
  }

  DensityMap<T> forward(const Tensor<T>& image, const SupportBox& box) const {
    FeatureSequence<T> q = extract_query_features(image, backbone_, spec_);
    const ScaleAggregationConfig agg{cfg_.effective_delta(), cfg_.support_resize};
    FeatureSequence<T> s = extract_support_features(image, box, agg, backbone_, spec_);
    q = attach_pe(q, cfg_.use_pe);
    s = attach_pe(s, cfg_.use_pe);
    auto [x_star, s_ref] = feature_correlation(q, s, corr_cfg_, corr_, cfg_.self_attn_x, cfg_.self_attn_s);
    (void)s_ref;
    const int stride = spec_.total_stride();
    const int hl = padded_dim(image.dim(1), stride) / stride;
    const int wl = padded_dim(image.dim(2), stride) / stride;
    return regress_density(x_star, hl, wl, reg_, 2.0 / stride);
  }

  const ModelConfig& config() const { return cfg_; }
  const BackboneSpec& backbone_spec() const { return spec_; }
  const std::map<std::string, Tensor<T>>& params() const { return registry_; }

  std::int64_t param_count() const {
    std::int64_t n = 0;
    for (const auto& [name, t] : registry_) n += t.size();
    return n;
  }

  void zero_grads() const {
    for (const auto& [name, t] : registry_) t.zero_grad();
  }

  /// Overwrites parameter values by registry name; the key sets must match.
  template <typename U>
  void load_state(const std::map<std::string, Tensor<U>>& state) {
    for (const auto& [name, t] : registry_) {
      auto it = state.find(name);
      if (it == state.end()) throw std::runtime_error("checkpoint: missing parameter " + name);
      if (it->second.size() != t.size())
        throw std::runtime_error("checkpoint: size mismatch for " + name);
      for (std::int64_t i = 0; i < t.size(); ++i)
        t.data()[i] = static_cast<T>(it->second.data()[i]);
    }
    for (const auto& [name, t] : state)
      if (!registry_.count(name)) throw std::runtime_error("checkpoint: unexpected parameter " + name);
  }

 private:
  void reg(const std::string& name, const Tensor<T>& t) { registry_.emplace(name, t); }

  void reg_attention(const std::string& prefix, const AttentionWeights<T>& w) {
    for (std::size_t i = 0; i < w.heads.size(); ++i) {
      reg(prefix + ".h" + std::to_string(i) + ".wq", w.heads[i].wq);
      reg(prefix + ".h" + std::to_string(i) + ".wk", w.heads[i].wk);
      reg(prefix + ".h" + std::to_string(i) + ".wv", w.heads[i].wv);
    }
    reg(prefix + ".wo", w.wo);
  }

  void reg_ln(const std::string& prefix, const LayerNormParams<T>& ln) {
    reg(prefix + ".gamma", ln.gamma);
    reg(prefix + ".beta", ln.beta);
  }

  void build_registry() {
    for (std::size_t si = 0; si < backbone_.stages.size(); ++si)
      for (std::size_t ci = 0; ci < backbone_.stages[si].size(); ++ci) {
        const std::string p = "backbone.s" + std::to_string(si) + ".c" + std::to_string(ci);
        reg(p + ".kern", backbone_.stages[si][ci].kernels);
        reg(p + ".bias", backbone_.stages[si][ci].bias);
      }
    for (std::size_t pi = 0; pi < backbone_.proj.size(); ++pi) {
      const std::string p = "backbone.proj" + std::to_string(backbone_.proj_first_level + static_cast<int>(pi));
      reg(p + ".kern", backbone_.proj[pi].kernels);
      reg(p + ".bias", backbone_.proj[pi].bias);
    }
    for (std::size_t t = 0; t < corr_.cycles.size(); ++t) {
      const std::string p = "corr.t" + std::to_string(t);
      reg_attention(p + ".sa_x.ma", corr_.cycles[t].sa_x.ma);
      reg_ln(p + ".sa_x.ln", corr_.cycles[t].sa_x.ln);
      reg_attention(p + ".sa_s.ma", corr_.cycles[t].sa_s.ma);
      reg_ln(p + ".sa_s.ln", corr_.cycles[t].sa_s.ln);
      reg_attention(p + ".ca.ma", corr_.cycles[t].corr.ma);
      reg_ln(p + ".ca.ln1", corr_.cycles[t].corr.ln1);
      reg_ln(p + ".ca.ln2", corr_.cycles[t].corr.ln2);
      reg(p + ".ca.ffn.w1", corr_.cycles[t].corr.ffn.w1);
      reg(p + ".ca.ffn.b1", corr_.cycles[t].corr.ffn.b1);
      reg(p + ".ca.ffn.w2", corr_.cycles[t].corr.ffn.w2);
      reg(p + ".ca.ffn.b2", corr_.cycles[t].corr.ffn.b2);
    }
    reg("reg.c1.kern", reg_.c1.kernels);
    reg("reg.c1.bias", reg_.c1.bias);
    reg("reg.c2.kern", reg_.c2.kernels);
    reg("reg.c2.bias", reg_.c2.bias);
    reg("reg.c3.kern", reg_.c3.kernels);
    reg("reg.c3.bias", reg_.c3.bias);
  }

  ModelConfig cfg_;
  BackboneSpec spec_;
  CorrelationConfig corr_cfg_;
  BackboneParams<T> backbone_;
  CorrelationParams<T> corr_;
  RegressorParams<T> reg_;
  std::map<std::string, Tensor<T>> registry_;
};

/// Forward + ground-truth rasterization + combined loss for one sample.
template <typename T>
Tensor<T> sample_loss(const CountingModel<T>& model, const Tensor<T>& image, const SupportBox& box,
                      const std::vector<std::array<double, 2>>& points,
                      const std::string& sample_id = "") {
  const DensityMap<T> pred = model.forward(image, box);
  const LossConfig loss_cfg = model.config().loss_config();
  const DensityMap<T> gt = gt_density_from_points<T>(points, pred.values.dim(0),
                                                     pred.values.dim(1), pred.scale,
                                                     loss_cfg.gt_sigma, sample_id);
  return total_loss(pred, gt, loss_cfg);
}

}  // namespace oscount
