#include <gtest/gtest.h>

#include <random>

#include "mta/kernels.hpp"
#include "test_util.hpp"

namespace mta {
namespace {

using kernels::KernelTable;

// Scalar reference vs the SIMD variant on shapes that hit every tail path.
class KernelEquivalence : public ::testing::Test {
 protected:
  void SetUp() override {
    simd_ = kernels::avx2_table();
    if (!simd_) GTEST_SKIP() << "no SIMD kernel variant on this machine";
  }
  const KernelTable& ref() const { return kernels::scalar_table(); }
  const KernelTable* simd_ = nullptr;
  std::mt19937_64 rng_{42};
};

TEST_F(KernelEquivalence, GemmAllTransposeCombinations) {
  const std::size_t dims[] = {1, 3, 4, 7, 8, 9, 17, 33};
  for (bool ta : {false, true}) {
    for (bool tb : {false, true}) {
      for (auto m : dims) {
        for (auto n : dims) {
          for (std::size_t k : {1, 5, 16, 300}) {
            const Tensor a = testing::random_tensor({m * k}, rng_);
            const Tensor b = testing::random_tensor({k * n}, rng_);
            const Tensor c0 = testing::random_tensor({m * n}, rng_);
            for (bool acc : {false, true}) {
              Tensor c_ref = c0, c_simd = c0;
              ref().gemm(ta, tb, m, n, k, a.ptr(), b.ptr(), c_ref.ptr(), acc);
              simd_->gemm(ta, tb, m, n, k, a.ptr(), b.ptr(), c_simd.ptr(), acc);
              ASSERT_LE(max_abs_diff(c_ref, c_simd), 1e-12 * double(k))
                  << "ta=" << ta << " tb=" << tb << " m=" << m << " n=" << n << " k=" << k;
            }
          }
        }
      }
    }
  }
}

TEST_F(KernelEquivalence, ElementwiseAndReductions) {
  for (std::size_t n : {0, 1, 3, 4, 5, 8, 31, 1000}) {
    const Tensor x = testing::random_tensor({n}, rng_);
    const Tensor y = testing::random_tensor({n}, rng_);
    Tensor r({n}), s({n});

    ref().add(n, x.ptr(), y.ptr(), r.ptr());
    simd_->add(n, x.ptr(), y.ptr(), s.ptr());
    EXPECT_EQ(r, s);
    ref().sub(n, x.ptr(), y.ptr(), r.ptr());
    simd_->sub(n, x.ptr(), y.ptr(), s.ptr());
    EXPECT_EQ(r, s);
    ref().mul(n, x.ptr(), y.ptr(), r.ptr());
    simd_->mul(n, x.ptr(), y.ptr(), s.ptr());
    EXPECT_EQ(r, s);
    ref().scale(n, -2.5, x.ptr(), r.ptr());
    simd_->scale(n, -2.5, x.ptr(), s.ptr());
    EXPECT_EQ(r, s);

    Tensor ay = y, by = y;
    ref().axpy(n, 0.75, x.ptr(), ay.ptr());
    simd_->axpy(n, 0.75, x.ptr(), by.ptr());
    EXPECT_LE(max_abs_diff(ay, by), 1e-15);

    EXPECT_NEAR(ref().sum(n, x.ptr()), simd_->sum(n, x.ptr()), 1e-12);
    EXPECT_NEAR(ref().abs_sum(n, x.ptr()), simd_->abs_sum(n, x.ptr()), 1e-12);
    EXPECT_NEAR(ref().dot(n, x.ptr(), y.ptr()), simd_->dot(n, x.ptr(), y.ptr()), 1e-12);
  }
}

TEST(KernelDispatch, ActiveTableCanBeOverridden) {
  const KernelTable& before = kernels::active();
  kernels::set_active(kernels::scalar_table());
  EXPECT_EQ(kernels::active().name, "scalar");
  kernels::set_active(before);
  EXPECT_EQ(kernels::active().name, before.name);
}

TEST(KernelScalar, GemmMatchesHandComputedProduct) {
  // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
  const double a[] = {1, 2, 3, 4};
  const double b[] = {5, 6, 7, 8};
  double c[4] = {};
  kernels::scalar_table().gemm(false, false, 2, 2, 2, a, b, c, false);
  EXPECT_DOUBLE_EQ(c[0], 19);
  EXPECT_DOUBLE_EQ(c[1], 22);
  EXPECT_DOUBLE_EQ(c[2], 43);
  EXPECT_DOUBLE_EQ(c[3], 50);
  // A^T * B^T = [1 3; 2 4] * [5 7; 6 8] = [23 31; 34 46]
  kernels::scalar_table().gemm(true, true, 2, 2, 2, a, b, c, false);
  EXPECT_DOUBLE_EQ(c[0], 23);
  EXPECT_DOUBLE_EQ(c[1], 31);
  EXPECT_DOUBLE_EQ(c[2], 34);
  EXPECT_DOUBLE_EQ(c[3], 46);
}

}  // namespace
}  // namespace mta
