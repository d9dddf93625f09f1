#pragma once

#include <cmath>
#include <functional>

#include "oscount/tensor.hpp"

namespace oscount {

/// Compares the recorded gradient of f at x against central finite
/// differences, coordinate by coordinate. Returns
/// max_i |analytic_i - fd_i| / max(1, |analytic_i|). The analytic gradient
/// comes from one taped evaluation; the finite differences run untaped.
/// Meaningful only at 64-bit precision.
template <typename T>
T grad_check(const std::function<Tensor<T>(const Tensor<T>&)>& f, const Tensor<T>& x0, T h) {
  Tensor<T> x = Tensor<T>::from(x0.shape(), {x0.data().begin(), x0.data().end()},
                                /*requires_grad=*/true);
  {
    Tape<T> tape;
    TapeScope<T> scope(tape);
    Tensor<T> loss = f(x);
    backward(tape, loss);
  }
  std::vector<T> analytic(x.grad().begin(), x.grad().end());

  T worst = T(0);
  for (std::int64_t i = 0; i < x.size(); ++i) {
    const T saved = x.data()[i];
    x.data()[i] = saved + h;
    const T up = f(x).item();
    x.data()[i] = saved - h;
    const T down = f(x).item();
    x.data()[i] = saved;
    const T fd = (up - down) / (T(2) * h);
    const T err = std::abs(analytic[static_cast<std::size_t>(i)] - fd) /
                  std::max(T(1), std::abs(analytic[static_cast<std::size_t>(i)]));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace oscount
