#include "remi/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "remi/error.hpp"

namespace remi {

const char* error_code_name(ErrorCode code) noexcept {
  switch (code) {
    case ErrorCode::input: return "input error";
    case ErrorCode::dimension: return "dimension error";
    case ErrorCode::numeric: return "numeric error";
    case ErrorCode::state: return "state error";
    case ErrorCode::io: return "io error";
    case ErrorCode::format: return "format error";
    case ErrorCode::access: return "access error";
    case ErrorCode::training: return "training error";
    case ErrorCode::stall: return "stall error";
    case ErrorCode::config: return "config error";
  }
  return "unknown error";
}

std::size_t shape_size(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, Real fill) : shape_(std::move(shape)) {
  for (auto d : shape_)
    if (d == 0) fail(ErrorCode::dimension, "tensor shape " + shape_str(shape_) + " has a zero extent");
  data_.assign(shape_size(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<Real> data) : shape_(std::move(shape)), data_(std::move(data)) {
  for (auto d : shape_)
    if (d == 0) fail(ErrorCode::dimension, "tensor shape " + shape_str(shape_) + " has a zero extent");
  if (shape_size(shape_) != data_.size())
    fail(ErrorCode::dimension, "tensor shape " + shape_str(shape_) + " does not match " +
                                   std::to_string(data_.size()) + " values");
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= shape_.size())
    fail(ErrorCode::dimension, "axis " + std::to_string(axis) + " out of range for " + shape_str(shape_));
  return shape_[axis];
}

std::span<Real> Tensor::grad() {
  if (!has_grad()) fail(ErrorCode::state, "tensor has no gradient buffer");
  return grad_;
}

std::span<const Real> Tensor::grad() const {
  if (!has_grad()) fail(ErrorCode::state, "tensor has no gradient buffer");
  return grad_;
}

void Tensor::ensure_grad() {
  if (grad_.size() != data_.size()) grad_.assign(data_.size(), 0.0);
}

void Tensor::zero_grad() {
  if (!grad_.empty()) std::fill(grad_.begin(), grad_.end(), 0.0);
}

void Tensor::drop_grad() noexcept {
  grad_.clear();
  grad_.shrink_to_fit();
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != data_.size())
    fail(ErrorCode::dimension, "cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
  return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](Real v) { return std::isfinite(v); });
}

Tensor Tensor::rows(std::size_t begin, std::size_t count) const {
  if (shape_.empty() || begin + count > shape_[0] || count == 0)
    fail(ErrorCode::dimension, "row range out of bounds for " + shape_str(shape_));
  const std::size_t stride = data_.size() / shape_[0];
  Shape s = shape_;
  s[0] = count;
  std::vector<Real> out(data_.begin() + static_cast<std::ptrdiff_t>(begin * stride),
                        data_.begin() + static_cast<std::ptrdiff_t>((begin + count) * stride));
  return Tensor(std::move(s), std::move(out));
}

Tensor Tensor::gather_rows(std::span<const std::size_t> indices) const {
  if (shape_.empty() || indices.empty()) fail(ErrorCode::dimension, "gather_rows needs a non-empty index list");
  const std::size_t stride = data_.size() / shape_[0];
  Shape s = shape_;
  s[0] = indices.size();
  std::vector<Real> out;
  out.reserve(indices.size() * stride);
  for (auto i : indices) {
    if (i >= shape_[0]) fail(ErrorCode::input, "row index " + std::to_string(i) + " out of range");
    auto first = data_.begin() + static_cast<std::ptrdiff_t>(i * stride);
    out.insert(out.end(), first, first + static_cast<std::ptrdiff_t>(stride));
  }
  return Tensor(std::move(s), std::move(out));
}

}  // namespace remi
