#include "kd/tensor.hpp"

#include <cmath>
#include <sstream>

namespace kd {

std::int64_t shape_numel(const std::vector<std::int64_t>& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const std::vector<std::int64_t>& shape) {
  std::ostringstream os;
  os << "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << ")";
  return os.str();
}

Tensor::Tensor(std::vector<std::int64_t> shape)
    : shape_(std::move(shape)),
      data_(static_cast<std::size_t>(shape_numel(shape_)), 0.0) {
  for (auto d : shape_) {
    if (d < 0) throw InvalidArgument("negative tensor dimension");
  }
}

Tensor Tensor::zeros(std::vector<std::int64_t> shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(std::vector<std::int64_t> shape, double value) {
  Tensor t(std::move(shape));
  t.fill(value);
  return t;
}

Tensor Tensor::scalar(double value) {
  Tensor t(std::vector<std::int64_t>{});
  t.data_.assign(1, value);
  return t;
}

Tensor Tensor::from(std::vector<std::int64_t> shape, std::vector<double> data) {
  Tensor t;
  t.shape_ = std::move(shape);
  if (shape_numel(t.shape_) != static_cast<std::int64_t>(data.size()))
    throw InvalidArgument("tensor data size does not match shape " + shape_str(t.shape_));
  t.data_ = std::move(data);
  return t;
}

double Tensor::item() const {
  if (data_.size() != 1) throw InvalidArgument("item() on tensor with numel != 1");
  return data_[0];
}

bool Tensor::all_finite() const {
  for (double v : data_)
    if (!std::isfinite(v)) return false;
  return true;
}

Tensor Tensor::reshaped(std::vector<std::int64_t> shape) const {
  if (shape_numel(shape) != numel())
    throw InvalidArgument("reshape to incompatible size " + shape_str(shape));
  Tensor t;
  t.shape_ = std::move(shape);
  t.data_ = data_;
  return t;
}

void Tensor::fill(double v) { data_.assign(data_.size(), v); }

void Tensor::add_(const Tensor& other) {
  if (!same_shape(other)) throw InvalidArgument("add_ shape mismatch");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
}

void Tensor::scale_(double s) {
  for (auto& v : data_) v *= s;
}

}  // namespace kd
