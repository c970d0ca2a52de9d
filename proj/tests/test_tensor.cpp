#include <gtest/gtest.h>

#include "attnmvs/ops.hpp"

using namespace attnmvs;

TEST(Tensor, ShapeAndValues) {
  Tensor<float> t(Shape{2, 3}, 1.5f);
  EXPECT_EQ(t.numel(), 6u);
  EXPECT_EQ(t.rank(), 2u);
  EXPECT_EQ(t.dim(1), 3);
  for (float v : t.values()) EXPECT_EQ(v, 1.5f);
  EXPECT_THROW(Tensor<float>(Shape{2, 2}, std::vector<float>{1, 2, 3}), ShapeError);
  EXPECT_THROW(Tensor<float>(Shape{-1}), ShapeError);
}

TEST(Tensor, ItemRequiresScalar) {
  EXPECT_EQ(Tensor<double>(Shape{1}, 4.0).item(), 4.0);
  EXPECT_THROW(Tensor<double>(Shape{2}).item(), ShapeError);
}

TEST(Tensor, DetachCopiesValues) {
  auto a = Tensor<double>::parameter({3}, {1, 2, 3});
  auto b = a.detach();
  EXPECT_FALSE(b.requires_grad());
  b.mutable_values()[0] = 9;
  EXPECT_EQ(a[0], 1);
}

TEST(Autodiff, SumGivesOnes) {
  auto x = Tensor<double>::parameter({2, 3}, {1, -2, 3, 4, 5, -6});
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    tape.backward(sum(x));
  }
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Autodiff, HalfSquaredNormGivesInput) {
  auto x = Tensor<double>::parameter({4}, {0.5, -1.25, 2.0, 3.0});
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    tape.backward(scale(sum(mul(x, x)), 0.5));
  }
  for (std::size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(x.grad()[i], x[i]);
}

TEST(Autodiff, NonScalarLossRejected) {
  auto x = Tensor<double>::parameter({2}, {1, 2});
  Tape<double> tape;
  TapeScope<double> scope(tape);
  auto y = scale(x, 2.0);
  EXPECT_THROW(tape.backward(y), ShapeError);
}

TEST(Autodiff, SecondBackwardRejected) {
  auto x = Tensor<double>::parameter({1}, {1});
  Tape<double> tape;
  TapeScope<double> scope(tape);
  auto y = sum(x);
  tape.backward(y);
  EXPECT_THROW(tape.backward(y), AccumulationError);
  tape.reset();
  EXPECT_EQ(tape.size(), 0u);
}

TEST(Autodiff, FanOutAccumulates) {
  // y = x*x + 3x -> dy/dx = 2x + 3
  auto x = Tensor<double>::parameter({1}, {2.0});
  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    tape.backward(sum(add(mul(x, x), scale(x, 3.0))));
  }
  EXPECT_DOUBLE_EQ(x.grad()[0], 7.0);
}

TEST(Autodiff, NoGradScopeRecordsNothing) {
  auto x = Tensor<double>::parameter({2}, {1, 2});
  Tape<double> tape;
  TapeScope<double> scope(tape);
  {
    NoGradScope<double> off;
    auto y = scale(x, 2.0);
    EXPECT_FALSE(y.requires_grad());
  }
  EXPECT_EQ(tape.size(), 0u);
}

TEST(Autodiff, CheckedModeFlagsNonFinite) {
  ASSERT_TRUE(checked_mode());
  auto x = Tensor<double>(Shape{1}, std::numeric_limits<double>::infinity());
  EXPECT_THROW(scale(x, 1.0), NumericError);
  set_checked_mode(false);
  EXPECT_NO_THROW(scale(x, 1.0));
  set_checked_mode(true);
}

TEST(Autodiff, ElementAccounting) {
  auto x = Tensor<float>::parameter({2, 3}, std::vector<float>(6, 1.0f));
  Tape<float> tape;
  TapeScope<float> scope(tape);
  auto y = scale(x, 2.0f);  // 6 elements
  auto z = sum(y);          // 1 element
  EXPECT_EQ(tape.recorded_elements(), 7);
  (void)z;
}
