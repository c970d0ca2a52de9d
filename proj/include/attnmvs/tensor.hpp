#pragma once

// Shaped arrays and the reverse-mode tape that records differentiable ops.
//
// A Tensor is a cheap shared handle. Ops never mutate their inputs; they
// allocate a fresh output and, when a tape is active and any input requires a
// gradient, push a closure that propagates the output gradient back to the
// inputs. Tape::backward() runs those closures once, in reverse order.

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "attnmvs/errors.hpp"

namespace attnmvs {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::int64_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

namespace detail {
inline std::atomic<bool>& checked_flag() {
  static std::atomic<bool> flag{true};
  return flag;
}
}  // namespace detail

/// Checked mode verifies every forward output is finite. On by default.
inline bool checked_mode() { return detail::checked_flag().load(std::memory_order_relaxed); }
inline void set_checked_mode(bool on) { detail::checked_flag().store(on, std::memory_order_relaxed); }

template <typename T>
struct TensorNode {
  Shape shape;
  std::vector<T> value;
  std::vector<T> grad;
  bool requires_grad = false;

  std::vector<T>& grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), T(0));
    return grad;
  }
};

template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0)) : node_(std::make_shared<TensorNode<T>>()) {
    for (auto e : shape)
      if (e < 0) throw ShapeError("negative extent in shape " + shape_str(shape));
    node_->value.assign(static_cast<std::size_t>(shape_numel(shape)), fill);
    node_->shape = std::move(shape);
  }

  Tensor(Shape shape, std::vector<T> values) : node_(std::make_shared<TensorNode<T>>()) {
    if (static_cast<std::int64_t>(values.size()) != shape_numel(shape))
      throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                       shape_str(shape));
    node_->shape = std::move(shape);
    node_->value = std::move(values);
  }

  /// Leaf tensor that accumulates gradients.
  static Tensor parameter(Shape shape, std::vector<T> values) {
    Tensor t(std::move(shape), std::move(values));
    t.set_requires_grad(true);
    return t;
  }

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t dim(std::size_t i) const { return node_->shape.at(i); }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->value.size(); }

  std::span<const T> values() const& { return node_->value; }
  // A temporary handle may own the only reference to its storage.
  std::span<const T> values() const&& = delete;
  std::span<T> mutable_values() { return node_->value; }
  const T* data() const { return node_->value.data(); }
  T* data() { return node_->value.data(); }

  T item() const {
    if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
    return node_->value[0];
  }

  T operator[](std::size_t i) const { return node_->value[i]; }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }

  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient view; all zeros if no gradient has reached this tensor.
  std::span<const T> grad() const {
    if (node_->grad.empty()) node_->grad.assign(node_->value.size(), T(0));
    return node_->grad;
  }
  void zero_grad() { node_->grad.clear(); }

  /// Deep copy of the values without gradient history.
  Tensor detach() const { return Tensor(shape(), node_->value); }

  template <typename U>
  Tensor<U> cast() const {
    return Tensor<U>(shape(), std::vector<U>(node_->value.begin(), node_->value.end()));
  }

  TensorNode<T>* node() const { return node_.get(); }
  const std::shared_ptr<TensorNode<T>>& shared_node() const { return node_; }

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }

 private:
  std::shared_ptr<TensorNode<T>> node_;
};

/// Ordered record of differentiable ops.
template <typename T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void record(std::function<void()> backward_fn) {
    entries_.push_back(std::move(backward_fn));
    ++recorded_total_;
  }

  /// Propagates d(loss)/d(x) into every reachable tensor that requires a gradient.
  void backward(const Tensor<T>& loss) {
    if (loss.numel() != 1)
      throw ShapeError("backward() requires a scalar loss, got shape " + shape_str(loss.shape()));
    if (consumed_) throw AccumulationError("backward() called twice without reset()");
    consumed_ = true;
    if (!loss.requires_grad()) return;
    loss.node()->grad_buffer()[0] += T(1);
    for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
  }

  void reset() {
    entries_.clear();
    consumed_ = false;
    recorded_elements_ = 0;
  }

  std::size_t size() const { return entries_.size(); }
  bool consumed() const { return consumed_; }

  /// Total output elements produced by recorded ops since the last reset.
  std::int64_t recorded_elements() const { return recorded_elements_; }
  void count_elements(std::int64_t n) { recorded_elements_ += n; }

  static Tape*& active() {
    thread_local Tape* current = nullptr;
    return current;
  }

 private:
  std::vector<std::function<void()>> entries_;
  bool consumed_ = false;
  std::int64_t recorded_elements_ = 0;
  std::size_t recorded_total_ = 0;
};

/// Makes a tape the recording target for ops on this thread until destroyed.
template <typename T>
class TapeScope {
 public:
  explicit TapeScope(Tape<T>& tape) : previous_(Tape<T>::active()) { Tape<T>::active() = &tape; }
  ~TapeScope() { Tape<T>::active() = previous_; }
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape<T>* previous_;
};

/// Disables recording on this thread until destroyed.
template <typename T>
class NoGradScope {
 public:
  NoGradScope() : previous_(Tape<T>::active()) { Tape<T>::active() = nullptr; }
  ~NoGradScope() { Tape<T>::active() = previous_; }
  NoGradScope(const NoGradScope&) = delete;
  NoGradScope& operator=(const NoGradScope&) = delete;

 private:
  Tape<T>* previous_;
};

namespace detail {

template <typename T>
void check_finite(const Tensor<T>& t, const char* op) {
  if (!checked_mode()) return;
  for (T v : t.values())
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite value produced by ") + op);
}

/// Returns the active tape if the op must be recorded, else nullptr.
template <typename T, typename... Ts>
Tape<T>* recording_tape(const Ts&... inputs) {
  Tape<T>* tape = Tape<T>::active();
  if (!tape) return nullptr;
  bool any = ((inputs.defined() && inputs.requires_grad()) || ...);
  return any ? tape : nullptr;
}

/// Common epilogue: finiteness check, element accounting, tape registration.
template <typename T, typename Fn>
void finish(Tensor<T>& out, Tape<T>* tape, const char* op, Fn&& backward_fn) {
  check_finite(out, op);
  if (Tape<T>* active = Tape<T>::active()) active->count_elements(static_cast<std::int64_t>(out.numel()));
  if (!tape) return;
  out.set_requires_grad(true);
  tape->record(std::forward<Fn>(backward_fn));
}

inline void require(bool cond, const std::string& what) {
  if (!cond) throw ShapeError(what);
}

}  // namespace detail

}  // namespace attnmvs
