#include "attbalance/tensor.hpp"

#include <cmath>
#include <sstream>
#include <utility>

namespace attbalance {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (const int d : shape) {
    if (d < 0) throw DimensionError("negative dimension in shape " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  Tensor t;
  const std::size_t n = shape_numel(shape);
  t.impl_->shape = std::move(shape);
  t.impl_->data.assign(n, 0.0);
  t.impl_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::full(Shape shape, double value) {
  Tensor t = zeros(std::move(shape));
  for (auto& v : t.impl_->data) v = value;
  return t;
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str(shape));
  }
  Tensor t;
  t.impl_->shape = std::move(shape);
  t.impl_->data = std::move(data);
  t.impl_->requires_grad = requires_grad;
  return t;
}

Tensor Tensor::scalar(double value) { return from_data({1}, {value}); }

double Tensor::item() const {
  if (numel() != 1) {
    throw ContractError("item() requires a scalar tensor, got shape " + shape_str(shape()));
  }
  return impl_->data[0];
}

double Tensor::at(const std::vector<int>& index) const {
  if (index.size() != impl_->shape.size()) {
    throw DimensionError("index rank " + std::to_string(index.size()) +
                         " does not match tensor shape " + shape_str(shape()));
  }
  std::size_t off = 0;
  for (std::size_t d = 0; d < index.size(); ++d) {
    if (index[d] < 0 || index[d] >= impl_->shape[d]) {
      throw DimensionError("index out of bounds for shape " + shape_str(shape()));
    }
    off = off * static_cast<std::size_t>(impl_->shape[d]) + static_cast<std::size_t>(index[d]);
  }
  return impl_->data[off];
}

double Tensor::operator()(int i) const { return at({i}); }
double Tensor::operator()(int i, int j) const { return at({i, j}); }

const std::vector<double>& Tensor::grad() const {
  if (!impl_->grad) {
    throw ContractError("gradient not populated; run backward() first");
  }
  return *impl_->grad;
}

std::vector<double>& Tensor::ensure_grad() {
  if (!impl_->grad) {
    impl_->grad = std::make_shared<std::vector<double>>(impl_->data.size(), 0.0);
  }
  return *impl_->grad;
}

void Tensor::zero_grad() {
  if (impl_->grad) {
    for (auto& g : *impl_->grad) g = 0.0;
  }
}

Tensor Tensor::detach() const {
  Tensor t;
  t.impl_->shape = impl_->shape;
  t.impl_->data = impl_->data;
  t.impl_->requires_grad = false;
  return t;
}

Tape& Tape::active() {
  thread_local Tape tape;
  return tape;
}

void Tape::backward(Tensor loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) {
    throw ContractError("backward: loss is not on the tape (requires_grad is false)");
  }
  if (backward_done_) {
    throw ContractError("backward: called twice without Tape::reset()");
  }
  if (!std::isfinite(loss.item())) {
    throw NumericError("backward: loss is not finite");
  }
  loss.ensure_grad()[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
  backward_done_ = true;
}

void Tape::reset() {
  entries_.clear();
  backward_done_ = false;
}

}  // namespace attbalance
