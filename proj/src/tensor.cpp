#include "mta/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "mta/errors.hpp"

namespace mta {

std::size_t shape_size(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)), data_(shape_size(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> values) : shape_(std::move(shape)), data_(std::move(values)) {
  if (data_.size() != shape_size(shape_)) {
    throw ShapeError("tensor data has " + std::to_string(data_.size()) + " values for shape " +
                     shape_string(shape_));
  }
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_size(shape) != data_.size()) {
    throw ShapeError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
  }
  return Tensor(std::move(shape), data_);
}

std::size_t Tensor::row_size() const {
  if (shape_.empty() || shape_[0] == 0) return 0;
  return data_.size() / shape_[0];
}

Tensor Tensor::slice_rows(std::size_t begin, std::size_t end) const {
  if (shape_.empty() || begin > end || end > shape_[0]) {
    throw ShapeError("row slice out of range for " + shape_string(shape_));
  }
  Shape s = shape_;
  s[0] = end - begin;
  const std::size_t row = row_size();
  return Tensor(std::move(s), std::vector<double>(data_.begin() + static_cast<std::ptrdiff_t>(begin * row),
                                                  data_.begin() + static_cast<std::ptrdiff_t>(end * row)));
}

Tensor Tensor::gather_rows(std::span<const std::size_t> rows) const {
  Shape s = shape_;
  s[0] = rows.size();
  const std::size_t row = row_size();
  std::vector<double> out(rows.size() * row);
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= shape_[0]) throw ShapeError("row index out of range");
    std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(rows[i] * row), row,
                out.begin() + static_cast<std::ptrdiff_t>(i * row));
  }
  return Tensor(std::move(s), std::move(out));
}

bool Tensor::all_finite() const noexcept {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor concat_rows(std::span<const Tensor> parts) {
  if (parts.empty()) return {};
  Shape s = parts.front().shape();
  std::size_t rows = 0;
  std::vector<double> out;
  for (const auto& p : parts) {
    if (p.rank() != s.size() || !std::equal(p.shape().begin() + 1, p.shape().end(), s.begin() + 1)) {
      throw ShapeError("concat_rows: mismatched trailing shape " + shape_string(p.shape()));
    }
    rows += p.dim(0);
    out.insert(out.end(), p.values().begin(), p.values().end());
  }
  s[0] = rows;
  return Tensor(std::move(s), std::move(out));
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError("max_abs_diff: shape mismatch");
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace mta
