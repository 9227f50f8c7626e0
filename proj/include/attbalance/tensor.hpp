#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "attbalance/errors.hpp"

namespace attbalance {

using Shape = std::vector<int>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  bool requires_grad = false;
  // Allocated lazily by the backward sweep; shared across handle copies.
  std::shared_ptr<std::vector<double>> grad;
};

}  // namespace detail

// Dense row-major f64 tensor. Tensor is a cheap handle: copies alias the
// same storage, so tape closures and parameter lists see one buffer.
// Values are immutable while an op graph that consumed them is alive;
// in-place mutation (optimizer updates, grad resets) happens between steps.
class Tensor {
 public:
  Tensor() : impl_(std::make_shared<detail::TensorImpl>()) {}

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value);
  static Tensor from_data(Shape shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value);

  const Shape& shape() const { return impl_->shape; }
  int rank() const { return static_cast<int>(impl_->shape.size()); }
  std::size_t numel() const { return impl_->data.size(); }

  std::vector<double>& data() { return impl_->data; }
  const std::vector<double>& data() const { return impl_->data; }

  double item() const;
  double at(const std::vector<int>& index) const;
  double operator()(int i) const;
  double operator()(int i, int j) const;

  bool requires_grad() const { return impl_->requires_grad; }
  void set_requires_grad(bool v) { impl_->requires_grad = v; }

  bool has_grad() const { return impl_->grad != nullptr; }
  const std::vector<double>& grad() const;
  // Pointer access used by the backward sweep; nullptr when untouched.
  std::vector<double>* grad_ptr() { return impl_->grad.get(); }
  std::vector<double>& ensure_grad();
  void zero_grad();
  void drop_grad() { impl_->grad.reset(); }

  // Same values, no tape participation. Copies the buffer so later parameter
  // updates cannot leak into stored constants.
  Tensor detach() const;

  bool same_impl(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Wengert list. Ops append a vector-Jacobian closure in execution order;
// backward replays them in exact reverse order, which is reverse topological
// order because execution order is topological.
class Tape {
 public:
  static Tape& active();

  bool recording() const { return recording_; }
  void set_recording(bool v) { recording_ = v; }

  std::size_t size() const { return entries_.size(); }
  bool backward_done() const { return backward_done_; }

  void record(std::function<void()> vjp) { entries_.push_back(std::move(vjp)); }

  // Seeds d(loss)/d(loss) = 1 and runs every recorded closure in reverse.
  // A second call without reset() is a contract violation.
  void backward(Tensor loss);

  // Clears recorded operations and re-arms backward.
  void reset();

 private:
  std::vector<std::function<void()>> entries_;
  bool recording_ = true;
  bool backward_done_ = false;
};

inline void backward(Tensor loss) { Tape::active().backward(std::move(loss)); }

// Scoped recording switch for evaluation and finite differencing.
class NoGradGuard {
 public:
  NoGradGuard() : prev_(Tape::active().recording()) {
    Tape::active().set_recording(false);
  }
  ~NoGradGuard() { Tape::active().set_recording(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

}  // namespace attbalance
