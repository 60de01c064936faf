#pragma once

// Dense arithmetic inner loops. Every kernel has a portable scalar reference
// implementation; an AVX2+FMA variant is compiled into a separate translation
// unit and picked at startup when the CPU reports support. Setting the
// environment variable MTA_KERNELS=scalar forces the reference path.

#include <cstddef>
#include <string_view>

namespace mta::kernels {

/// C (m x n) = op(A) * op(B) [+ C]. All matrices are dense row-major.
/// op(A) is m x k: A is stored m x k, or k x m when trans_a is set.
/// op(B) is k x n: B is stored k x n, or n x k when trans_b is set.
using GemmFn = void (*)(bool trans_a, bool trans_b, std::size_t m, std::size_t n, std::size_t k,
                        const double* a, const double* b, double* c, bool accumulate);
using AxpyFn = void (*)(std::size_t n, double alpha, const double* x, double* y);
using BinaryFn = void (*)(std::size_t n, const double* x, const double* y, double* out);
using ScaleFn = void (*)(std::size_t n, double alpha, const double* x, double* out);
using ReduceFn = double (*)(std::size_t n, const double* x);
using DotFn = double (*)(std::size_t n, const double* x, const double* y);

struct KernelTable {
  std::string_view name;
  GemmFn gemm;
  AxpyFn axpy;   // y += alpha * x
  BinaryFn add;  // out = x + y
  BinaryFn sub;  // out = x - y
  BinaryFn mul;  // out = x * y
  ScaleFn scale; // out = alpha * x
  ReduceFn sum;
  ReduceFn abs_sum;
  DotFn dot;
};

const KernelTable& scalar_table();

/// nullptr when the AVX2 variant was not compiled in or the CPU lacks AVX2/FMA.
const KernelTable* avx2_table();

/// Kernel set used by the tensor operations.
const KernelTable& active();

/// Overrides the runtime choice (tests use this to compare variants).
void set_active(const KernelTable& table);

}  // namespace mta::kernels
