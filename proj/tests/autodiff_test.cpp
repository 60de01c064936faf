#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "mta/autodiff.hpp"
#include "mta/errors.hpp"
#include "test_util.hpp"

namespace mta {
namespace {

using ad::Var;
using Builder = std::function<Var(const std::vector<Var>&)>;

constexpr double kStep = 1e-3;
constexpr double kRelTol = 1e-3;
constexpr double kAbsFloor = 1e-7;

double eval(const Builder& f, const std::vector<Tensor>& xs) {
  ad::NoGradGuard guard;
  std::vector<Var> vars;
  for (const auto& x : xs) vars.emplace_back(x);
  return f(vars).value()[0];
}

// Compares reverse-mode gradients with central differences on every input.
void expect_gradients_match(const Builder& f, const std::vector<Tensor>& inputs, bool second_order = false) {
  std::vector<Var> vars;
  for (const auto& x : inputs) vars.emplace_back(x, true);
  const Var out = f(vars);
  ASSERT_EQ(out.size(), 1u);
  const auto grads = ad::grad(out, vars, second_order);
  for (std::size_t which = 0; which < inputs.size(); ++which) {
    ASSERT_EQ(grads[which].shape(), inputs[which].shape());
    for (std::size_t i = 0; i < inputs[which].size(); ++i) {
      auto perturbed = [&](const Tensor& xi) {
        auto xs = inputs;
        xs[which] = xi;
        return eval(f, xs);
      };
      const double fd = testing::central_difference(perturbed, inputs[which], i, kStep);
      const double an = grads[which].value()[i];
      EXPECT_TRUE(testing::close(an, fd, kRelTol, kAbsFloor))
          << "input " << which << " coord " << i << ": analytic " << an << " vs fd " << fd;
    }
  }
}

// Reduces an arbitrary-shaped output to a scalar with fixed random weights so
// that every output element's adjoint is exercised.
Var weighted_sum(const Var& y, std::uint64_t seed = 7) {
  std::mt19937_64 rng(seed);
  auto w = std::make_shared<const Tensor>(testing::random_tensor(y.shape(), rng, 0.5, 1.5));
  return ad::sum_all(ad::mul_const(y, w));
}

Tensor away_from_zero(Shape shape, std::mt19937_64& rng) {
  Tensor t = testing::random_tensor(std::move(shape), rng, 0.2, 1.5);
  std::bernoulli_distribution flip(0.5);
  for (double& v : t.data()) {
    if (flip(rng)) v = -v;
  }
  return t;
}

class AutodiffFd : public ::testing::Test {
 protected:
  std::mt19937_64 rng_{2024};
};

TEST_F(AutodiffFd, ElementwiseBinary) {
  const Tensor a = testing::random_tensor({3, 4}, rng_);
  const Tensor b = away_from_zero({3, 4}, rng_);
  expect_gradients_match([](const auto& v) { return weighted_sum(ad::add(v[0], v[1])); }, {a, b});
  expect_gradients_match([](const auto& v) { return weighted_sum(ad::sub(v[0], v[1])); }, {a, b});
  expect_gradients_match([](const auto& v) { return weighted_sum(ad::mul(v[0], v[1])); }, {a, b});
  expect_gradients_match([](const auto& v) { return weighted_sum(ad::div(v[0], v[1])); }, {a, b});
}

TEST_F(AutodiffFd, ElementwiseUnary) {
  const Tensor a = away_from_zero({2, 5}, rng_);
  expect_gradients_match([](const auto& v) { return weighted_sum(ad::scale(v[0], -1.7)); }, {a});
  expect_gradients_match([](const auto& v) { return weighted_sum(ad::add_scalar(v[0], 3.0)); }, {a});
  expect_gradients_match([](const auto& v) { return weighted_sum(ad::neg(v[0])); }, {a});
  expect_gradients_match([](const auto& v) { return weighted_sum(ad::abs(v[0])); }, {a});
  expect_gradients_match([](const auto& v) { return weighted_sum(ad::atan(ad::scale(v[0], 2.0))); }, {a});
  expect_gradients_match([](const auto& v) { return weighted_sum(ad::relu(v[0])); }, {a});
  expect_gradients_match([](const auto& v) { return weighted_sum(ad::clip(v[0], -0.9, 0.9)); },
                         {away_from_zero({2, 5}, rng_)});
}

TEST_F(AutodiffFd, SignAndReplaceZeroCarryNoGradient) {
  Var x(Tensor({3}, {-2.0, 0.0, 5.0}), true);
  const Var s = ad::sign(x);
  EXPECT_EQ(s.value(), Tensor({3}, {-1.0, 0.0, 1.0}));
  auto g = ad::grad(ad::sum_all(s), std::vector<Var>{x});
  EXPECT_EQ(g[0].value(), Tensor({3}, 0.0));

  const Var r = ad::replace_zero(x, 1.0);
  EXPECT_EQ(r.value(), Tensor({3}, {-2.0, 1.0, 5.0}));
  g = ad::grad(ad::sum_all(r), std::vector<Var>{x});
  EXPECT_EQ(g[0].value(), Tensor({3}, {1.0, 0.0, 1.0}));
}

TEST_F(AutodiffFd, AffineChannels) {
  auto scale = std::make_shared<const std::vector<double>>(std::vector<double>{0.5, -2.0, 1.5});
  auto shift = std::make_shared<const std::vector<double>>(std::vector<double>{1.0, 0.0, -3.0});
  const Tensor a = testing::random_tensor({2, 2, 3}, rng_);
  expect_gradients_match([&](const auto& v) { return weighted_sum(ad::affine_channels(v[0], scale, shift)); },
                         {a});
}

TEST_F(AutodiffFd, MatmulEveryTransposeCombination) {
  for (bool ta : {false, true}) {
    for (bool tb : {false, true}) {
      const Tensor a = testing::random_tensor(ta ? Shape{4, 3} : Shape{3, 4}, rng_);
      const Tensor b = testing::random_tensor(tb ? Shape{5, 4} : Shape{4, 5}, rng_);
      expect_gradients_match([&](const auto& v) { return weighted_sum(ad::matmul(v[0], v[1], ta, tb)); },
                             {a, b});
    }
  }
}

TEST_F(AutodiffFd, StructuralOps) {
  const Tensor a = testing::random_tensor({2, 3, 4}, rng_);
  expect_gradients_match([](const auto& v) { return weighted_sum(ad::reshape(v[0], {6, 4})); }, {a});
  expect_gradients_match([](const auto& v) { return weighted_sum(ad::reduce_mid(v[0], 2, 3, 4, {2, 4})); }, {a});
  const Tensor b = testing::random_tensor({2, 4}, rng_);
  expect_gradients_match([](const auto& v) { return weighted_sum(ad::expand_mid(v[0], 2, 3, 4, {2, 3, 4})); },
                         {b});

  auto index = std::make_shared<const std::vector<std::int64_t>>(std::vector<std::int64_t>{3, -1, 0, 3, 7, 5});
  const Tensor c = testing::random_tensor({8}, rng_);
  expect_gradients_match([&](const auto& v) { return weighted_sum(ad::gather(v[0], index, {6})); }, {c});
  const Tensor d = testing::random_tensor({6}, rng_);
  expect_gradients_match([&](const auto& v) { return weighted_sum(ad::scatter(v[0], index, {8})); }, {d});
}

TEST_F(AutodiffFd, Im2colAndCol2im) {
  ad::ConvGeometry geom{.batch = 2, .height = 5, .width = 4, .channels = 2,
                        .kernel_h = 3, .kernel_w = 3, .stride = 2, .pad = 1};
  const Tensor x = testing::random_tensor({2, 5, 4, 2}, rng_);
  expect_gradients_match([&](const auto& v) { return weighted_sum(ad::im2col(v[0], geom)); }, {x});
  const Tensor cols = testing::random_tensor({geom.rows(), geom.patch()}, rng_);
  expect_gradients_match([&](const auto& v) { return weighted_sum(ad::col2im(v[0], geom)); }, {cols});
}

TEST_F(AutodiffFd, AdjointPairsSatisfyInnerProductIdentity) {
  ad::ConvGeometry geom{.batch = 1, .height = 6, .width = 6, .channels = 3,
                        .kernel_h = 3, .kernel_w = 3, .stride = 1, .pad = 1};
  const Tensor x = testing::random_tensor({1, 6, 6, 3}, rng_);
  const Tensor y = testing::random_tensor({geom.rows(), geom.patch()}, rng_);
  ad::NoGradGuard guard;
  const Tensor ax = ad::im2col(Var(x), geom).value();
  const Tensor aty = ad::col2im(Var(y), geom).value();
  const double lhs = std::inner_product(ax.data().begin(), ax.data().end(), y.data().begin(), 0.0);
  const double rhs = std::inner_product(x.data().begin(), x.data().end(), aty.data().begin(), 0.0);
  EXPECT_NEAR(lhs, rhs, 1e-10 * std::abs(lhs));
}

TEST_F(AutodiffFd, LossesAndReductions) {
  const Tensor logits = testing::random_tensor({3, 4}, rng_, -3.0, 3.0);
  const std::vector<int> labels{2, 0, 3};
  expect_gradients_match([](const auto& v) { return weighted_sum(ad::softmax_rows(v[0])); }, {logits});
  expect_gradients_match([&](const auto& v) { return weighted_sum(ad::cross_entropy(v[0], labels)); }, {logits});
  expect_gradients_match([](const auto& v) { return ad::mean_all(v[0]); }, {logits});
  expect_gradients_match([](const auto& v) { return weighted_sum(ad::sum_per_row(v[0])); }, {logits});
  const Tensor r = testing::random_tensor({3}, rng_);
  expect_gradients_match([](const auto& v) { return weighted_sum(ad::expand_per_row(v[0], {3, 2, 2})); }, {r});
}

TEST(AutodiffValues, CrossEntropyOnTwoLogits) {
  // -log softmax([2, 0])[0] = log(1 + e^-2)
  ad::NoGradGuard guard;
  const Var ce = ad::cross_entropy(Var(Tensor({1, 2}, {2.0, 0.0})), std::vector<int>{0});
  EXPECT_NEAR(ce.value()[0], 0.12692801104297263, 1e-14);
}

TEST(AutodiffValues, CrossEntropyRejectsBadInputs) {
  ad::NoGradGuard guard;
  const Var logits(Tensor({1, 2}, {std::nan(""), 0.0}));
  EXPECT_THROW(ad::cross_entropy(logits, std::vector<int>{0}), NumericError);
  EXPECT_THROW(ad::cross_entropy(Var(Tensor({1, 2})), std::vector<int>{2}), ConfigError);
}

TEST(AutodiffValues, ReluAndClipPropagateNan) {
  ad::NoGradGuard guard;
  const Var x(Tensor({3}, {std::nan(""), -1.0, 300.0}));
  const Tensor r = ad::relu(x).value(), c = ad::clip(x, 0.0, 255.0).value();
  EXPECT_TRUE(std::isnan(r[0]));
  EXPECT_TRUE(std::isnan(c[0]));
  EXPECT_EQ(r[1], 0.0);
  EXPECT_EQ(c[2], 255.0);
}

TEST(AutodiffGraph, UnrelatedInputGetsZeroGradient) {
  Var x(Tensor({2}, 1.0), true);
  Var y(Tensor({3}, 1.0), true);
  const auto g = ad::grad(ad::sum_all(ad::mul(x, x)), std::vector<Var>{x, y});
  EXPECT_EQ(g[0].value(), Tensor({2}, 2.0));
  EXPECT_EQ(g[1].value(), Tensor({3}, 0.0));
}

TEST(AutodiffGraph, NonScalarOutputNeedsSeed) {
  Var x(Tensor({2}, 1.0), true);
  EXPECT_THROW(ad::grad(ad::scale(x, 2.0), std::vector<Var>{x}), ShapeError);
  const auto g = ad::grad(ad::scale(x, 2.0), std::vector<Var>{x}, false, Var(Tensor({2}, {1.0, -1.0})));
  EXPECT_EQ(g[0].value(), Tensor({2}, {2.0, -2.0}));
}

TEST(AutodiffGraph, NoGradModeRecordsNothing) {
  Var x(Tensor({2}, 1.0), true);
  ad::NoGradGuard guard;
  const Var y = ad::mul(x, x);
  EXPECT_FALSE(y.requires_grad());
  EXPECT_TRUE(y.is_leaf());
}

TEST(AutodiffGraph, FirstOrderGradientIsConstantWithoutCreateGraph) {
  Var x(Tensor({2}, 3.0), true);
  const auto g = ad::grad(ad::sum_all(ad::mul(x, x)), std::vector<Var>{x}, false);
  EXPECT_FALSE(g[0].requires_grad());
  const auto h = ad::grad(ad::sum_all(ad::mul(x, x)), std::vector<Var>{x}, true);
  EXPECT_TRUE(h[0].requires_grad());
}

// ---- second order ----------------------------------------------------------

TEST(AutodiffSecondOrder, CubicHasAnalyticSecondDerivative) {
  // f = sum x^3, df/dx = 3x^2, d/dx sum(df/dx) = 6x
  Var x(Tensor({3}, {1.0, -2.0, 0.5}), true);
  const Var f = ad::sum_all(ad::mul(ad::mul(x, x), x));
  const auto g = ad::grad(f, std::vector<Var>{x}, true);
  const auto h = ad::grad(ad::sum_all(g[0]), std::vector<Var>{x});
  EXPECT_EQ(h[0].value(), Tensor({3}, {6.0, -12.0, 3.0}));
}

// The quantity differentiated by the meta trainer: a loss evaluated after a
// step along an input gradient, as a function of the weights.
TEST_F(AutodiffFd, GradientOfInputGradientStepMatchesFiniteDifferences) {
  ad::ConvGeometry geom{.batch = 2, .height = 4, .width = 4, .channels = 1,
                        .kernel_h = 3, .kernel_w = 3, .stride = 1, .pad = 1};
  const Tensor x0 = testing::random_tensor({2, 4, 4, 1}, rng_);
  const Tensor w_conv = testing::random_tensor({9, 3}, rng_, -0.5, 0.5);
  const Tensor w_fc = testing::random_tensor({48, 3}, rng_, -0.3, 0.3);
  const std::vector<int> labels{1, 2};

  auto net = [&](const Var& x, const Var& wc, const Var& wf) {
    const Var h = ad::atan(ad::matmul(ad::im2col(x, geom), wc));
    return ad::matmul(ad::reshape(h, {2, 48}), wf);
  };
  auto meta_objective = [&](const std::vector<Var>& w) {
    ad::EnableGradGuard enable;
    Var x(x0, true);
    const Var inner = ad::sum_all(ad::cross_entropy(net(x, w[0], w[1]), labels));
    const Var gx = ad::grad(inner, std::vector<Var>{x}, true)[0];
    const Var dir = ad::div(gx, ad::expand_per_row(ad::replace_zero(ad::sum_per_row(ad::abs(gx)), 1.0),
                                                   gx.shape()));
    const Var x1 = ad::add(x, ad::scale(dir, 5.0));
    return ad::mean_all(ad::cross_entropy(net(x1, w[0], w[1]), labels));
  };
  expect_gradients_match(meta_objective, {w_conv, w_fc}, false);
}

}  // namespace
}  // namespace mta
