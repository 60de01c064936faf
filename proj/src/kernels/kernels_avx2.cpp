// Compiled with -mavx2 -mfma. Only reached through avx2_table() after a
// runtime CPU check, so the rest of the library stays baseline x86-64.

#include <immintrin.h>

#include <algorithm>
#include <vector>

#include "mta/kernels.hpp"

namespace mta::kernels {
namespace {

constexpr std::size_t kBlockK = 256;

inline double hsum(__m256d v) {
  __m128d lo = _mm256_castpd256_pd128(v);
  __m128d hi = _mm256_extractf128_pd(v, 1);
  lo = _mm_add_pd(lo, hi);
  __m128d sh = _mm_unpackhi_pd(lo, lo);
  return _mm_cvtsd_f64(_mm_add_sd(lo, sh));
}

struct AView {
  const double* a;
  std::size_t row_stride;
  std::size_t col_stride;
  double at(std::size_t i, std::size_t p) const { return a[i * row_stride + p * col_stride]; }
};

// C[i0..i0+R, j0..j0+8) += sum_{p in [p0, p1)} A(i, p) * B(p, j)
template <int R>
inline void tile_r8(const AView& av, const double* b, std::size_t n, double* c, std::size_t i0, std::size_t j0,
                    std::size_t p0, std::size_t p1) {
  __m256d acc0[R];
  __m256d acc1[R];
  for (int r = 0; r < R; ++r) {
    acc0[r] = _mm256_loadu_pd(c + (i0 + r) * n + j0);
    acc1[r] = _mm256_loadu_pd(c + (i0 + r) * n + j0 + 4);
  }
  for (std::size_t p = p0; p < p1; ++p) {
    const __m256d b0 = _mm256_loadu_pd(b + p * n + j0);
    const __m256d b1 = _mm256_loadu_pd(b + p * n + j0 + 4);
    for (int r = 0; r < R; ++r) {
      const __m256d ar = _mm256_set1_pd(av.at(i0 + r, p));
      acc0[r] = _mm256_fmadd_pd(ar, b0, acc0[r]);
      acc1[r] = _mm256_fmadd_pd(ar, b1, acc1[r]);
    }
  }
  for (int r = 0; r < R; ++r) {
    _mm256_storeu_pd(c + (i0 + r) * n + j0, acc0[r]);
    _mm256_storeu_pd(c + (i0 + r) * n + j0 + 4, acc1[r]);
  }
}

template <int R>
inline void tile_r4(const AView& av, const double* b, std::size_t n, double* c, std::size_t i0, std::size_t j0,
                    std::size_t p0, std::size_t p1) {
  __m256d acc[R];
  for (int r = 0; r < R; ++r) acc[r] = _mm256_loadu_pd(c + (i0 + r) * n + j0);
  for (std::size_t p = p0; p < p1; ++p) {
    const __m256d b0 = _mm256_loadu_pd(b + p * n + j0);
    for (int r = 0; r < R; ++r) acc[r] = _mm256_fmadd_pd(_mm256_set1_pd(av.at(i0 + r, p)), b0, acc[r]);
  }
  for (int r = 0; r < R; ++r) _mm256_storeu_pd(c + (i0 + r) * n + j0, acc[r]);
}

inline void tile_scalar(const AView& av, const double* b, std::size_t n, double* c, std::size_t i0, std::size_t i1,
                        std::size_t j0, std::size_t j1, std::size_t p0, std::size_t p1) {
  for (std::size_t i = i0; i < i1; ++i) {
    for (std::size_t j = j0; j < j1; ++j) {
      double s = c[i * n + j];
      for (std::size_t p = p0; p < p1; ++p) s += av.at(i, p) * b[p * n + j];
      c[i * n + j] = s;
    }
  }
}

void gemm_avx2(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k, const double* a,
               const double* b, double* c, bool accumulate) {
  if (!accumulate) std::fill(c, c + m * n, 0.0);
  if (m == 0 || n == 0 || k == 0) return;

  std::vector<double> packed;
  if (trans_b) {
    packed.resize(k * n);
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) packed[p * n + j] = b[j * k + p];
    b = packed.data();
  }
  const AView av{a, trans_a ? 1 : k, trans_a ? m : 1};

  const std::size_t m4 = m - m % 4;
  const std::size_t n8 = n - n % 8;
  const std::size_t n4 = n - n % 4;
  for (std::size_t p0 = 0; p0 < k; p0 += kBlockK) {
    const std::size_t p1 = std::min(k, p0 + kBlockK);
    for (std::size_t j0 = 0; j0 < n8; j0 += 8) {
      std::size_t i0 = 0;
      for (; i0 < m4; i0 += 4) tile_r8<4>(av, b, n, c, i0, j0, p0, p1);
      for (; i0 < m; ++i0) tile_r8<1>(av, b, n, c, i0, j0, p0, p1);
    }
    if (n8 < n4) {
      std::size_t i0 = 0;
      for (; i0 < m4; i0 += 4) tile_r4<4>(av, b, n, c, i0, n8, p0, p1);
      for (; i0 < m; ++i0) tile_r4<1>(av, b, n, c, i0, n8, p0, p1);
    }
    if (n4 < n) tile_scalar(av, b, n, c, 0, m, n4, n, p0, p1);
  }
}

void axpy_avx2(std::size_t n, double alpha, const double* x, double* y) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(y + i, _mm256_fmadd_pd(va, _mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

template <typename VecOp, typename ScalarOp>
inline void binary_loop(std::size_t n, const double* x, const double* y, double* out, VecOp vop, ScalarOp sop) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) _mm256_storeu_pd(out + i, vop(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i)));
  for (; i < n; ++i) out[i] = sop(x[i], y[i]);
}

void add_avx2(std::size_t n, const double* x, const double* y, double* out) {
  binary_loop(n, x, y, out, [](__m256d a, __m256d b) { return _mm256_add_pd(a, b); },
              [](double a, double b) { return a + b; });
}

void sub_avx2(std::size_t n, const double* x, const double* y, double* out) {
  binary_loop(n, x, y, out, [](__m256d a, __m256d b) { return _mm256_sub_pd(a, b); },
              [](double a, double b) { return a - b; });
}

void mul_avx2(std::size_t n, const double* x, const double* y, double* out) {
  binary_loop(n, x, y, out, [](__m256d a, __m256d b) { return _mm256_mul_pd(a, b); },
              [](double a, double b) { return a * b; });
}

void scale_avx2(std::size_t n, double alpha, const double* x, double* out) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) _mm256_storeu_pd(out + i, _mm256_mul_pd(va, _mm256_loadu_pd(x + i)));
  for (; i < n; ++i) out[i] = alpha * x[i];
}

double sum_avx2(std::size_t n, const double* x) {
  __m256d acc = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) acc = _mm256_add_pd(acc, _mm256_loadu_pd(x + i));
  double s = hsum(acc);
  for (; i < n; ++i) s += x[i];
  return s;
}

double abs_sum_avx2(std::size_t n, const double* x) {
  const __m256d mask = _mm256_castsi256_pd(_mm256_set1_epi64x(0x7fffffffffffffffLL));
  __m256d acc = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) acc = _mm256_add_pd(acc, _mm256_and_pd(mask, _mm256_loadu_pd(x + i)));
  double s = hsum(acc);
  for (; i < n; ++i) s += x[i] < 0 ? -x[i] : x[i];
  return s;
}

double dot_avx2(std::size_t n, const double* x, const double* y) {
  __m256d acc = _mm256_setzero_pd();
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) acc = _mm256_fmadd_pd(_mm256_loadu_pd(x + i), _mm256_loadu_pd(y + i), acc);
  double s = hsum(acc);
  for (; i < n; ++i) s += x[i] * y[i];
  return s;
}

}  // namespace

const KernelTable& avx2_table_unchecked() {
  static const KernelTable table{"avx2",   gemm_avx2,  axpy_avx2, add_avx2,     sub_avx2,
                                 mul_avx2, scale_avx2, sum_avx2,  abs_sum_avx2, dot_avx2};
  return table;
}

}  // namespace mta::kernels
