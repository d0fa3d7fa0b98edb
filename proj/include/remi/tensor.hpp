#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace remi {

using Real = double;
using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_str(const Shape& shape);

/// Dense row-major array of Real with an optional gradient buffer of equal length.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, Real fill = 0.0);
  Tensor(Shape shape, std::vector<Real> data);

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<Real> data() noexcept { return data_; }
  std::span<const Real> data() const noexcept { return data_; }
  Real& operator[](std::size_t i) { return data_[i]; }
  Real operator[](std::size_t i) const { return data_[i]; }
  Real& at(std::size_t row, std::size_t col) { return data_[row * shape_.back() + col]; }
  Real at(std::size_t row, std::size_t col) const { return data_[row * shape_.back() + col]; }

  bool has_grad() const noexcept { return !grad_.empty(); }
  std::span<Real> grad();
  std::span<const Real> grad() const;
  void ensure_grad();
  void zero_grad();
  void drop_grad() noexcept;

  Tensor reshaped(Shape shape) const;
  bool all_finite() const noexcept;

  /// Rows [begin, begin+count) along axis 0.
  Tensor rows(std::size_t begin, std::size_t count) const;
  /// Gathers the given rows along axis 0.
  Tensor gather_rows(std::span<const std::size_t> indices) const;

 private:
  Shape shape_;
  std::vector<Real> data_;
  std::vector<Real> grad_;
};

}  // namespace remi
