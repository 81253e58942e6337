#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include <gtest/gtest.h>

#include "ercmoe/autodiff.hpp"
#include "ercmoe/grad_check.hpp"
#include "ercmoe/random.hpp"

using namespace ercmoe;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double sd = 1.0) { return normal_tensor(std::move(shape), sd, rng); }

// Reduces an op's output to a scalar through fixed random weights, so every
// output entry contributes a distinct upstream gradient.
Var weighted_sum(Var y, std::uint64_t seed) {
  Rng rng(seed ^ 0x9e3779b97f4a7c15ULL);
  Tensor w = random_tensor(y.shape(), rng);
  return sum(hadamard(y, y.tape().constant(std::move(w))));
}

void expect_gradients_match(const std::function<Var(Tape&, Var)>& op, Shape shape, double tol = 1e-4,
                            int seeds = 100) {
  for (int s = 0; s < seeds; ++s) {
    Rng rng(static_cast<std::uint64_t>(s) + 1);
    Tensor theta = random_tensor(shape, rng);
    const auto rep = grad_check([&](Tape& t, Var x) { return weighted_sum(op(t, x), s); }, theta, 1e-5);
    ASSERT_LT(rep.max_rel_error, tol) << "seed " << s << " index " << rep.worst_index << " analytic "
                                      << rep.analytic_at_worst << " numeric " << rep.numeric_at_worst;
  }
}

}  // namespace

TEST(Tensor, RejectsMismatchedData) {
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>{1, 2, 3}), DimensionError);
  EXPECT_THROW(Tensor(Shape{0, 3}), DimensionError);
}

TEST(Tape, ParentsPrecedeChildren) {
  Tape t;
  Var a = t.leaf(Tensor::vector({1, 2}));
  Var b = silu(a);
  Var c = add(a, b);
  EXPECT_LT(a.id(), b.id());
  EXPECT_LT(b.id(), c.id());
}

TEST(Tape, ValueReferencesSurviveGrowth) {
  Tape t;
  Var a = t.leaf(Tensor::vector({1.5, -2.0}));
  const Tensor& ref = a.value();
  for (int i = 0; i < 5000; ++i) t.constant(Tensor::scalar(i));
  EXPECT_EQ(ref, Tensor::vector({1.5, -2.0}));
}

TEST(Tape, NonFiniteValueThrows) {
  Tape t;
  Var a = t.leaf(Tensor::vector({0.0}));
  EXPECT_THROW(reciprocal(a), NumericError);
}

TEST(Tape, SharedSubexpressionAccumulates) {
  Tape t;
  Var x = t.leaf(Tensor::scalar(3.0));
  t.backward(sum(add(x, x)));
  EXPECT_DOUBLE_EQ(t.gradient(x)[0], 2.0);
}

TEST(Tape, BoundParameterReceivesGradient) {
  Tensor p = Tensor::vector({1.0, -2.0});
  Tape t;
  Var x = t.param(p);
  t.backward(sum(hadamard(x, x)));
  ASSERT_TRUE(p.has_grad());
  EXPECT_DOUBLE_EQ(p.grad[0], 2.0);
  EXPECT_DOUBLE_EQ(p.grad[1], -4.0);
}

TEST(Matmul, IdentityAndProduct) {
  Tape t;
  Var i2 = t.constant(Tensor::identity(2));
  Var b = t.constant(Tensor::matrix({{3, 4}, {5, 6}}));
  EXPECT_EQ(matmul(i2, b).value(), Tensor::matrix({{3, 4}, {5, 6}}));
  Var row = t.constant(Tensor::matrix({{1, 2}}));
  Var col = t.constant(Tensor::matrix({{3}, {4}}));
  EXPECT_DOUBLE_EQ(matmul(row, col).value()(0, 0), 11.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  Tape t;
  Var a = t.constant(Tensor({2, 3}));
  Var b = t.constant(Tensor({2, 3}));
  try {
    matmul(a, b);
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    EXPECT_NE(std::string(e.what()).find("[2x3] x [2x3]"), std::string::npos) << e.what();
  }
}

TEST(Matmul, GradientOfSumMatchesFiniteDifferences) {
  Rng rng(7);
  Tensor a = random_tensor({3, 4}, rng);
  Tensor b = random_tensor({4, 2}, rng);
  const auto rep = grad_check([&](Tape& t, Var x) { return sum(matmul(x, t.constant(b))); }, a, 1e-5);
  EXPECT_LT(rep.max_rel_error, 1e-6);
}

TEST(Silu, Values) {
  Tape t;
  Var y = silu(t.constant(Tensor::vector({0.0, 1.0, -1.0})));
  EXPECT_DOUBLE_EQ(y.value()[0], 0.0);
  EXPECT_NEAR(y.value()[1], 1.0 / (1.0 + std::exp(-1.0)), 1e-15);
  EXPECT_NEAR(y.value()[2], -1.0 / (1.0 + std::exp(1.0)), 1e-15);
  EXPECT_NEAR(y.value()[1], 0.7310585786300049, 1e-15);
  EXPECT_NEAR(y.value()[2], -0.2689414213699951, 1e-15);
}

TEST(Hadamard, Values) {
  Tape t;
  Var x = t.constant(Tensor::vector({1, 2}));
  EXPECT_EQ(hadamard(x, t.constant(Tensor::vector({3, 4}))).value(), Tensor::vector({3, 8}));
  EXPECT_EQ(hadamard(x, t.constant(Tensor::vector({1, 1}))).value(), x.value());
  EXPECT_EQ(hadamard(x, t.constant(Tensor::vector({0, 0}))).value(), Tensor::vector({0, 0}));
  EXPECT_THROW(hadamard(x, t.constant(Tensor::vector({1, 2, 3}))), DimensionError);
}

TEST(Softmax, ValuesAndShiftInvariance) {
  Tape t;
  Var y = softmax_rows(t.constant(Tensor::matrix({{0, 0}, {std::log(2.0), 0}})));
  EXPECT_DOUBLE_EQ(y.value()(0, 0), 0.5);
  EXPECT_NEAR(y.value()(1, 0), 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(y.value()(1, 1), 1.0 / 3.0, 1e-15);

  Rng rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    Tensor x = random_tensor({4, 6}, rng, 5.0);
    Tensor shifted = x;
    for (std::size_t i = 0; i < 4; ++i)
      for (double& v : shifted.row(i)) v += 37.5 * static_cast<double>(i) - 11.0;
    Var a = softmax_rows(t.constant(x));
    Var b = softmax_rows(t.constant(shifted));
    for (std::size_t i = 0; i < 4; ++i) {
      double row_sum = 0.0;
      for (std::size_t j = 0; j < 6; ++j) {
        row_sum += a.value()(i, j);
        EXPECT_NEAR(a.value()(i, j), b.value()(i, j), 1e-12);
      }
      EXPECT_NEAR(row_sum, 1.0, 1e-12);
    }
  }
}

TEST(L2NormRows, Values) {
  Tape t;
  Var n = l2_norm_rows(t.constant(Tensor::matrix({{3, 4}, {0, 0}, {0, 1}})));
  EXPECT_DOUBLE_EQ(n.value()[0], 5.0);
  EXPECT_DOUBLE_EQ(n.value()[1], 0.0);
  EXPECT_DOUBLE_EQ(n.value()[2], 1.0);
}

TEST(L2NormRows, ZeroRowHasZeroSubgradient) {
  Tape t;
  Var x = t.leaf(Tensor::matrix({{0, 0}, {3, 4}}));
  t.backward(sum(l2_norm_rows(x)));
  const Tensor g = t.gradient(x);
  EXPECT_EQ(g(0, 0), 0.0);
  EXPECT_EQ(g(0, 1), 0.0);
  EXPECT_DOUBLE_EQ(g(1, 0), 0.6);
  EXPECT_DOUBLE_EQ(g(1, 1), 0.8);
}

TEST(ReluClip, ValuesAndKinkConvention) {
  Tape t;
  Var x = t.leaf(Tensor::vector({-1.0, 2.0, 0.0}));
  Var y = relu_clip(x);
  EXPECT_EQ(y.value(), Tensor::vector({0.0, 2.0, 0.0}));
  t.backward(sum(y));
  EXPECT_EQ(t.gradient(x), Tensor::vector({0.0, 1.0, 0.0}));
}

TEST(TopK, SelectionAndTies) {
  const std::vector<double> v{0.1, 0.5, 0.4};
  TopK two = topk(v, 2);
  EXPECT_EQ(two.indices, (std::vector<std::size_t>{1, 2}));
  const std::vector<double> tied{0.3, 0.3, 0.3};
  EXPECT_EQ(topk(tied, 1).indices, std::vector<std::size_t>{0});
  EXPECT_EQ(topk(tied, 3).indices, (std::vector<std::size_t>{0, 1, 2}));
  EXPECT_THROW(topk(v, 0), std::out_of_range);
  EXPECT_THROW(topk(v, 4), std::out_of_range);
}

TEST(GradCheck, ScalarExamples) {
  Tensor x = Tensor::scalar(3.0);
  auto rep = grad_check([](Tape&, Var v) { return sum(hadamard(v, v)); }, x, 1e-5);
  EXPECT_DOUBLE_EQ(rep.analytic_at_worst, 6.0);
  EXPECT_NEAR(rep.numeric_at_worst, 6.0, 1e-7);

  Tensor y = Tensor::vector({1.0, 2.0});
  rep = grad_check([](Tape& t, Var) { return sum(t.constant(Tensor::scalar(4.0))); }, y, 1e-5);
  EXPECT_EQ(rep.analytic_at_worst, 0.0);
  EXPECT_EQ(rep.numeric_at_worst, 0.0);
  EXPECT_EQ(rep.max_rel_error, 0.0);
}

TEST(GradCheck, RejectsNonPositiveStep) {
  Tensor x = Tensor::scalar(1.0);
  EXPECT_THROW(grad_check([](Tape&, Var v) { return sum(v); }, x, 0.0), std::invalid_argument);
}

// Every differentiable op against central differences, 100 seeds each.

TEST(GradientProperty, Matmul) {
  expect_gradients_match(
      [](Tape& t, Var x) {
        Rng rng(99);
        return matmul(x, t.constant(random_tensor({4, 3}, rng)));
      },
      {2, 4});
  expect_gradients_match(
      [](Tape& t, Var x) {
        Rng rng(98);
        return matmul(t.constant(random_tensor({3, 2}, rng)), x);
      },
      {2, 4});
}

TEST(GradientProperty, Elementwise) {
  expect_gradients_match([](Tape&, Var x) { return silu(x); }, {3, 3});
  expect_gradients_match([](Tape&, Var x) { return hadamard(x, x); }, {5});
  expect_gradients_match([](Tape&, Var x) { return relu_clip(x); }, {3, 4});
  expect_gradients_match([](Tape&, Var x) { return reciprocal(add(hadamard(x, x), x.tape().constant(Tensor({6}, 1.0)))); },
                         {6});
  expect_gradients_match([](Tape&, Var x) { return sub(scale(x, 2.5), transpose(transpose(x))); }, {2, 3});
}

TEST(GradientProperty, RowOps) {
  expect_gradients_match([](Tape&, Var x) { return softmax_rows(x); }, {3, 5});
  expect_gradients_match([](Tape&, Var x) { return l2_norm_rows(x); }, {4, 3});
  expect_gradients_match([](Tape&, Var x) { return scale_rows(x, l2_norm_rows(x)); }, {3, 3});
  expect_gradients_match([](Tape&, Var x) { return sub_column_vector(x, diag(x)); }, {3, 3});
  expect_gradients_match([](Tape&, Var x) { return sub_row_vector(x, scale(diag(x), 0.7)); }, {3, 3});
  expect_gradients_match([](Tape&, Var x) { return mean_rows(x); }, {4, 2});
}

TEST(GradientProperty, IndexingOps) {
  expect_gradients_match([](Tape&, Var x) { return gather_rows(x, {2, 0, 2}); }, {3, 2});
  expect_gradients_match([](Tape&, Var x) { return gather_elements(x, {0, 2, 1}, {1, 0, 1}); }, {3, 2});
  expect_gradients_match(
      [](Tape&, Var x) { return index_add_rows(x, {1, 1, 0}, gather_rows(silu(x), {0, 1, 2})); }, {3, 2});
  expect_gradients_match(
      [](Tape&, Var x) {
        return stack_columns({l2_norm_rows(x), l2_norm_rows(silu(x))});
      },
      {3, 4});
}
