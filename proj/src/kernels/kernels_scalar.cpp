#include <cmath>
#include <vector>

#include "mta/kernels.hpp"

namespace mta::kernels {
namespace {

void gemm_scalar(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const double* a,
                 const double* b, double* c, bool accumulate) {
  if (!accumulate) {
    for (std::size_t i = 0; i < m * n; ++i) c[i] = 0.0;
  }
  // Row i of C accumulates A(i, p) * B(p, :) for increasing p.
  for (std::size_t i = 0; i < m; ++i) {
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double av = trans_a ? a[p * m + i] : a[i * k + p];
      if (trans_b) {
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * b[j * k + p];
      } else {
        const double* brow = b + p * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }
}

void axpy_scalar(std::size_t n, double alpha, const double* x, double* y) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void add_scalar(std::size_t n, const double* x, const double* y, double* out) {
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] + y[i];
}

void sub_scalar(std::size_t n, const double* x, const double* y, double* out) {
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] - y[i];
}

void mul_scalar(std::size_t n, const double* x, const double* y, double* out) {
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] * y[i];
}

void scale_scalar(std::size_t n, double alpha, const double* x, double* out) {
  for (std::size_t i = 0; i < n; ++i) out[i] = alpha * x[i];
}

double sum_scalar(std::size_t n, const double* x) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += x[i];
  return s;
}

double abs_sum_scalar(std::size_t n, const double* x) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += std::abs(x[i]);
  return s;
}

double dot_scalar(std::size_t n, const double* x, const double* y) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += x[i] * y[i];
  return s;
}

}  // namespace

const KernelTable& scalar_table() {
  static const KernelTable table{"scalar",   gemm_scalar, axpy_scalar,    add_scalar, sub_scalar,
                                 mul_scalar, scale_scalar, sum_scalar, abs_sum_scalar, dot_scalar};
  return table;
}

}  // namespace mta::kernels
