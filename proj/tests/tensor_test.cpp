#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "kvmem/autograd.hpp"

using namespace kvmem;

TEST(Tensor, ShapeMustMatchData) {
  EXPECT_THROW(Tensor<float>({2, 3}, std::vector<float>(5)), ShapeError);
  EXPECT_THROW(Tensor<float>(Shape{2, 0}), ShapeError);
  EXPECT_THROW(Tensor<float>(Shape{}), ShapeError);
  Tensor<float> t({2, 3}, 1.5f);
  EXPECT_EQ(t.size(), 6u);
  EXPECT_EQ(t.rows(), 2u);
  EXPECT_EQ(t.cols(), 3u);
}

TEST(Tensor, RankOneActsAsRowVector) {
  auto v = Tensor<double>::vector({1, 2, 3});
  EXPECT_EQ(v.rows(), 1u);
  EXPECT_EQ(v.cols(), 3u);
}

TEST(Tensor, GradSlotMatchesShape) {
  Tensor<float> t({3, 2});
  EXPECT_FALSE(t.has_grad());
  t.zero_grad();
  ASSERT_TRUE(t.has_grad());
  EXPECT_EQ(t.grad().size(), t.size());
  t.clear_grad();
  EXPECT_FALSE(t.has_grad());
}

TEST(Matmul, IdentityLeavesOperandUnchanged) {
  Tape<double> tape;
  auto a = tape.constant(Tensor<double>::matrix({{1, 0}, {0, 1}}));
  auto b = tape.constant(Tensor<double>::matrix({{3, 4}, {5, 6}}));
  EXPECT_TRUE(tape.value(matmul(tape, a, b)).same_values(Tensor<double>::matrix({{3, 4}, {5, 6}})));

  auto row = tape.constant(Tensor<double>::matrix({{2, -1}}));
  EXPECT_TRUE(tape.value(matmul(tape, row, a)).same_values(Tensor<double>::matrix({{2, -1}})));
}

TEST(Matmul, HandComputedInnerProduct) {
  Tape<double> tape;
  auto a = tape.constant(Tensor<double>::matrix({{1, 2}}));
  auto b = tape.constant(Tensor<double>::matrix({{3}, {4}}));
  EXPECT_DOUBLE_EQ(tape.value(matmul(tape, a, b)).item(), 11.0);
}

TEST(Matmul, DimensionMismatchNamesBothShapes) {
  Tape<double> tape;
  auto a = tape.constant(Tensor<double>({2, 3}));
  auto b = tape.constant(Tensor<double>({2, 3}));
  try {
    matmul(tape, a, b);
    FAIL() << "expected ShapeError";
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    const auto first = msg.find("[2x3]");
    ASSERT_NE(first, std::string::npos) << msg;
    EXPECT_NE(msg.find("[2x3]", first + 1), std::string::npos) << msg;
  }
}

TEST(Matmul, RecordedOnlyWhenAnInputRequiresGrad) {
  Tensor<double> w = Tensor<double>::matrix({{1, 2}, {3, 4}});
  Tape<double> tape;
  auto x = tape.constant(Tensor<double>::matrix({{1, 1}}));
  auto frozen = matmul(tape, x, tape.param(w));
  EXPECT_FALSE(tape.needs_grad(frozen));
  w.set_requires_grad(true);
  auto live = matmul(tape, x, tape.param(w));
  EXPECT_TRUE(tape.needs_grad(live));
}

TEST(Pointwise, Definitions) {
  Tape<double> tape;
  auto zero = tape.constant(Tensor<double>::scalar(0.0));
  EXPECT_EQ(tape.value(swish(tape, zero)).item(), 0.0);

  auto x = tape.constant(Tensor<double>::vector({2, -1}));
  EXPECT_TRUE(tape.value(relu(tape, x)).same_values(Tensor<double>::vector({2, 0})));

  // 2 * sigmoid(2), high-precision reference.
  auto two = tape.constant(Tensor<double>::scalar(2.0));
  EXPECT_NEAR(tape.value(swish(tape, two)).item(), 1.7615941559557649, 1e-12);
  EXPECT_NEAR(tape.value(pointwise(tape, Pointwise::swish, two)).item(), 1.761594, 1e-6);
}

TEST(Pointwise, BinaryKindsRequireEqualShapes) {
  Tape<double> tape;
  auto a = tape.constant(Tensor<double>({2, 2}));
  auto b = tape.constant(Tensor<double>({2, 3}));
  EXPECT_THROW(pointwise(tape, Pointwise::mul, a, b), ShapeError);
  EXPECT_THROW(pointwise(tape, Pointwise::add, a, b), ShapeError);
  EXPECT_THROW(pointwise(tape, Pointwise::relu, a, b), std::invalid_argument);
}

TEST(SoftmaxCrossEntropy, UniformLogitsGiveLogVocab) {
  for (std::size_t target = 0; target < 4; ++target) {
    Tape<double> tape;
    auto l = tape.constant(Tensor<double>::vector({0.3, 0.3, 0.3, 0.3}));
    EXPECT_NEAR(tape.value(softmax_cross_entropy(tape, l, target)).item(),
                1.3862943611198906, 1e-12);
  }
}

TEST(SoftmaxCrossEntropy, LargeLogitsDoNotOverflow) {
  Tape<float> tape;
  auto l = tape.constant(Tensor<float>::vector({1000.f, 0.f}));
  const float loss = tape.value(softmax_cross_entropy(tape, l, 0)).item();
  EXPECT_TRUE(std::isfinite(loss));
  EXPECT_NEAR(loss, 0.0f, 1e-6f);
  // The losing class: -log softmax = 1000 exactly in 64-bit.
  Tape<double> t64;
  auto l64 = t64.constant(Tensor<double>::vector({1000.0, 0.0}));
  EXPECT_NEAR(t64.value(softmax_cross_entropy(t64, l64, 1)).item(), 1000.0, 1e-9);
}

TEST(SoftmaxCrossEntropy, ClosedForm) {
  Tape<double> tape;
  auto l = tape.constant(Tensor<double>::vector({0.0, std::log(3.0)}));
  EXPECT_NEAR(tape.value(softmax_cross_entropy(tape, l, 1)).item(), 0.2876820724517809,
              1e-12);
}

TEST(SoftmaxCrossEntropy, TargetOutOfRange) {
  Tape<double> tape;
  auto l = tape.constant(Tensor<double>::vector({0.0, 1.0}));
  EXPECT_THROW(softmax_cross_entropy(tape, l, 2), std::out_of_range);
}

TEST(SoftmaxCrossEntropy, NeverNegative) {
  std::mt19937_64 rng(5);
  std::normal_distribution<double> n(0.0, 10.0);
  for (int i = 0; i < 200; ++i) {
    Tensor<double> l({6});
    for (auto& v : l.data()) v = n(rng);
    Tape<double> tape;
    auto v = tape.constant(l);
    EXPECT_GE(tape.value(softmax_cross_entropy(tape, v, i % 6)).item(), 0.0);
  }
}
