#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "oscount/tensor.hpp"

namespace oscount {

struct AdamConfig {
  double lr = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// One bias-corrected Adam update on a single parameter. `t` is the 1-based
/// step count. Mutates param data in place; callers run this between tapes.
template <typename T>
void adam_step(Tensor<T> param, std::span<const T> grad, std::vector<T>& m, std::vector<T>& v,
               std::uint64_t t, const AdamConfig& cfg) {
  const std::size_t n = static_cast<std::size_t>(param.size());
  if (grad.size() != n || m.size() != n || v.size() != n)
    throw std::invalid_argument("adam_step: state size mismatch");
  const T b1 = static_cast<T>(cfg.beta1), b2 = static_cast<T>(cfg.beta2);
  const T corr1 = T(1) - static_cast<T>(std::pow(cfg.beta1, static_cast<double>(t)));
  const T corr2 = T(1) - static_cast<T>(std::pow(cfg.beta2, static_cast<double>(t)));
  const T lr = static_cast<T>(cfg.lr), eps = static_cast<T>(cfg.eps);
  T* p = param.data().data();
  for (std::size_t i = 0; i < n; ++i) {
    m[i] = b1 * m[i] + (T(1) - b1) * grad[i];
    v[i] = b2 * v[i] + (T(1) - b2) * grad[i] * grad[i];
    const T mhat = m[i] / corr1;
    const T vhat = v[i] / corr2;
    p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
  }
}

/// Adam over a named parameter registry. Gradients are consumed from each
/// tensor's grad buffer and zeroed afterwards.
template <typename T>
class AdamOptimizer {
 public:
  AdamOptimizer(std::map<std::string, Tensor<T>> params, AdamConfig cfg)
      : params_(std::move(params)), cfg_(cfg) {
    for (auto& [name, p] : params_) {
      m_[name].assign(static_cast<std::size_t>(p.size()), T(0));
      v_[name].assign(static_cast<std::size_t>(p.size()), T(0));
    }
  }

  void step() {
    ++t_;
    for (auto& [name, p] : params_) {
      adam_step(p, std::span<const T>(p.grad()), m_[name], v_[name], t_, cfg_);
      p.zero_grad();
    }
  }

  std::uint64_t step_count() const { return t_; }
  void set_step_count(std::uint64_t t) { t_ = t; }
  std::map<std::string, std::vector<T>>& moments_m() { return m_; }
  std::map<std::string, std::vector<T>>& moments_v() { return v_; }
  const AdamConfig& config() const { return cfg_; }

 private:
  std::map<std::string, Tensor<T>> params_;
  AdamConfig cfg_;
  std::map<std::string, std::vector<T>> m_, v_;
  std::uint64_t t_ = 0;
};

}  // namespace oscount
