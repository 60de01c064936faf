#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace mta {

using Shape = std::vector<std::size_t>;

std::size_t shape_size(const Shape& shape);
std::string shape_string(const Shape& shape);

/// Dense row-major array of doubles. Images use (batch, height, width, channels).
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double value) { return Tensor({1}, value); }

  const Shape& shape() const noexcept { return shape_; }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
  std::size_t size() const noexcept { return data_.size(); }
  bool empty() const noexcept { return data_.empty(); }

  std::span<double> data() noexcept { return data_; }
  std::span<const double> data() const noexcept { return data_; }
  double* ptr() noexcept { return data_.data(); }
  const double* ptr() const noexcept { return data_.data(); }
  const std::vector<double>& values() const noexcept { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  /// Same data under a new shape with equal element count.
  Tensor reshaped(Shape shape) const;

  /// Rows [begin, end) along the leading axis.
  Tensor slice_rows(std::size_t begin, std::size_t end) const;
  /// Leading-axis rows picked by index, in the given order.
  Tensor gather_rows(std::span<const std::size_t> rows) const;

  /// Number of elements per leading-axis row.
  std::size_t row_size() const;

  bool all_finite() const noexcept;

  friend bool operator==(const Tensor& a, const Tensor& b) = default;

 private:
  Shape shape_;
  std::vector<double> data_;
};

/// Concatenates tensors along the leading axis; trailing shapes must agree.
Tensor concat_rows(std::span<const Tensor> parts);

double max_abs_diff(const Tensor& a, const Tensor& b);

}  // namespace mta
