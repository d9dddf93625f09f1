#pragma once

#include <cassert>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace oscount {

using Shape = std::vector<int>;

inline std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
  os << "]";
  return os.str();
}

template <typename T>
struct TensorData {
  Shape shape;
  std::vector<T> values;
  std::vector<T> grad;  // same length as values iff requires_grad
  bool requires_grad = false;
};

/// Dense row-major n-d array. Copying a Tensor shares storage; values are
/// never mutated by ops once created (gradients are the only mutable part),
/// so shared handles stay consistent across the recorded graph.
template <typename T>
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    return Tensor(std::move(shape), requires_grad);
  }

  static Tensor full(Shape shape, T value, bool requires_grad = false) {
    Tensor t(std::move(shape), requires_grad);
    std::fill(t.data().begin(), t.data().end(), value);
    return t;
  }

  static Tensor from(Shape shape, std::vector<T> values, bool requires_grad = false) {
    Tensor t;
    t.d_ = std::make_shared<TensorData<T>>();
    t.d_->shape = std::move(shape);
    if (static_cast<std::int64_t>(values.size()) != shape_numel(t.d_->shape))
      throw std::invalid_argument("tensor: " + std::to_string(values.size()) +
                                  " values do not fill shape " + shape_str(t.d_->shape));
    t.d_->values = std::move(values);
    t.d_->requires_grad = requires_grad;
    if (requires_grad) t.d_->grad.assign(t.d_->values.size(), T(0));
    return t;
  }

  static Tensor scalar(T value, bool requires_grad = false) {
    return from({1}, {value}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(d_); }
  const Shape& shape() const { return d_->shape; }
  int dim(int i) const { return d_->shape[static_cast<std::size_t>(i)]; }
  int ndim() const { return static_cast<int>(d_->shape.size()); }
  std::int64_t size() const { return static_cast<std::int64_t>(d_->values.size()); }
  bool requires_grad() const { return d_ && d_->requires_grad; }

  // Handles share storage, so element access stays mutable through a const
  // handle (same rule as shared_ptr). Ops never write to their inputs.
  std::span<T> data() const { return d_->values; }
  std::span<T> grad() const {
    if (!d_->requires_grad) throw std::logic_error("tensor does not track gradients");
    return d_->grad;
  }

  T item() const {
    if (size() != 1) throw std::invalid_argument("item() on non-scalar tensor " + shape_str(shape()));
    return d_->values[0];
  }

  void zero_grad() const {
    if (d_ && d_->requires_grad) std::fill(d_->grad.begin(), d_->grad.end(), T(0));
  }

  /// Deep copy of values only; the clone never tracks gradients.
  Tensor clone_detached() const {
    Tensor t;
    t.d_ = std::make_shared<TensorData<T>>();
    t.d_->shape = d_->shape;
    t.d_->values = d_->values;
    t.d_->requires_grad = false;
    return t;
  }

  bool same_storage(const Tensor& other) const { return d_ == other.d_; }

 private:
  Tensor(Shape shape, bool requires_grad) {
    d_ = std::make_shared<TensorData<T>>();
    d_->shape = std::move(shape);
    for (int dim : d_->shape)
      if (dim <= 0) throw std::invalid_argument("tensor: non-positive dim in " + shape_str(d_->shape));
    d_->values.assign(static_cast<std::size_t>(shape_numel(d_->shape)), T(0));
    d_->requires_grad = requires_grad;
    if (requires_grad) d_->grad.assign(d_->values.size(), T(0));
  }

  std::shared_ptr<TensorData<T>> d_;
};

template <typename To, typename From>
Tensor<To> cast(const Tensor<From>& t) {
  std::vector<To> vals(t.data().begin(), t.data().end());
  return Tensor<To>::from(t.shape(), std::move(vals));
}

/// Recorded forward pass. Nodes are appended in execution order, which is a
/// topological order of the graph; the backward pass walks them once in
/// reverse. A tape is armed for the current thread via TapeScope; ops only
/// record while a tape is armed and some input tracks gradients.
template <typename T>
class Tape {
 public:
  void push(std::function<void()> node) { nodes_.push_back(std::move(node)); }
  std::size_t size() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

  static Tape*& current() {
    static thread_local Tape* cur = nullptr;
    return cur;
  }

  void run_backward() {
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> nodes_;
};

template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : prev_(Tape<T>::current()) { Tape<T>::current() = &tape; }
  ~TapeScope() { Tape<T>::current() = prev_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* prev_;
};

template <typename T>
bool tape_active() {
  return Tape<T>::current() != nullptr;
}

/// Seeds d(loss)/d(loss) = 1 and replays the tape in reverse. Every tensor
/// created with requires_grad starts with a zero gradient buffer, so tensors
/// the loss never touched end up with an all-zero grad.
template <typename T>
void backward(Tape<T>& tape, Tensor<T> loss) {
  if (loss.size() != 1)
    throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(loss.shape()));
  if (!loss.requires_grad())
    throw std::invalid_argument("backward: loss is not connected to any tracked tensor");
  loss.grad()[0] += T(1);
  tape.run_backward();
}

#ifndef NDEBUG
template <typename T>
inline void debug_check_finite(const Tensor<T>& t, const char* op) {
  for (T v : t.data())
    assert(std::isfinite(static_cast<double>(v)) && op != nullptr);
}
#else
template <typename T>
inline void debug_check_finite(const Tensor<T>&, const char*) {}
#endif

}  // namespace oscount
