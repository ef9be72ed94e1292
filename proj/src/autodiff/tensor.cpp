#include "creat/autodiff/tensor.hpp"

#include <numeric>
#include <sstream>

#include "creat/common.hpp"

namespace creat::ad {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream out;
  out << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i != 0) out << ',';
    out << shape[i];
  }
  out << ']';
  return out.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> values(shape_numel(shape), value);
  return from(std::move(shape), std::move(values), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values,
                    bool requires_grad) {
  for (std::size_t d : shape) {
    if (d == 0) {
      throw ConfigError("tensor shape " + shape_str(shape) +
                        " has a zero dimension");
    }
  }
  if (shape_numel(shape) != values.size()) {
    throw ConfigError("tensor shape " + shape_str(shape) + " needs " +
                      std::to_string(shape_numel(shape)) + " values, got " +
                      std::to_string(values.size()));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  Tensor t(std::move(impl));
  t.set_requires_grad(requires_grad);
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

std::span<double> Tensor::mutable_data() {
  if (impl_->readers > 0) {
    throw std::logic_error("tensor " + describe() +
                           " is read by a live graph and cannot be modified");
  }
  return impl_->data;
}

double Tensor::item() const {
  if (impl_->data.size() != 1) {
    throw ConfigError("item() on non-scalar tensor " + describe());
  }
  return impl_->data[0];
}

void Tensor::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  if (on) {
    impl_->grad.assign(impl_->data.size(), 0.0);
  } else {
    impl_->grad.clear();
  }
}

void Tensor::zero_grad() {
  std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0);
}

Tensor& Tensor::set_name(std::string name) {
  impl_->name = std::move(name);
  return *this;
}

std::string Tensor::describe() const {
  if (!impl_) return "<undefined>";
  if (!impl_->name.empty()) return "'" + impl_->name + "' " + shape_str(impl_->shape);
  return shape_str(impl_->shape);
}

Tensor Tensor::clone() const {
  return from(impl_->shape, impl_->data, false);
}

}  // namespace creat::ad
