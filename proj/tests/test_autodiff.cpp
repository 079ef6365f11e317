#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "cubevit/autodiff.hpp"
#include "cubevit/errors.hpp"
#include "grad_suite.hpp"

using namespace cubevit;
using ad::Var;

TEST(Tensor, ShapeAndDataLengthAgree) {
  Tensor t({2, 3, 4});
  EXPECT_EQ(t.numel(), 24u);
  EXPECT_THROW(Tensor({2, 2}, std::vector<double>(3)), ShapeError);
  EXPECT_THROW(Tensor({2, 0}), ShapeError);
}

TEST(Tensor, SoftmaxExamples) {
  Tensor a = softmax(Tensor({1, 2}, {0.0, 0.0}), 1);
  EXPECT_DOUBLE_EQ(a[0], 0.5);
  EXPECT_DOUBLE_EQ(a[1], 0.5);
  Tensor b = softmax(Tensor({1, 2}, {std::log(2.0), 0.0}), 1);
  EXPECT_NEAR(b[0], 2.0 / 3.0, 1e-15);
  EXPECT_NEAR(b[1], 1.0 / 3.0, 1e-15);
}

TEST(Tensor, SoftmaxShiftInvariantAndRowsSumToOne) {
  Rng rng(3);
  Tensor x = Tensor::randn({5, 7}, rng, 3.0);
  Tensor shifted = x;
  for (auto& v : shifted.data()) v += 123.25;
  Tensor p = softmax(x, 1), q = softmax(shifted, 1);
  for (std::size_t r = 0; r < 5; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < 7; ++c) {
      s += p.at(r, c);
      EXPECT_NEAR(p.at(r, c), q.at(r, c), 1e-12);
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Tensor, SoftmaxLargeLogitsStayFinite) {
  Tensor p = softmax(Tensor({1, 3}, {1000.0, 999.0, -1000.0}), 1);
  EXPECT_TRUE(p.all_finite());
}

TEST(Tensor, GeluExamples) {
  EXPECT_EQ(gelu(0.0), 0.0);
  EXPECT_NEAR(gelu(10.0), 10.0, 1e-6);
  // Phi(1) = 0.5 * (1 + erf(1 / sqrt 2)), erf series evaluated independently.
  double erf_val = 0.0, term = 1.0 / std::sqrt(2.0);
  const double x = 1.0 / std::sqrt(2.0);
  for (int n = 0; n < 30; ++n) {
    erf_val += term / (2 * n + 1);
    term *= -x * x / (n + 1);
  }
  erf_val *= 2.0 / std::sqrt(std::numbers::pi);
  EXPECT_NEAR(gelu(1.0), 0.5 * (1.0 + erf_val), 1e-12);
  EXPECT_NEAR(gelu(1.0), 0.841345, 1e-6);
}

TEST(Tensor, LayerNormExamples) {
  Tensor g({2}, 1.0), b({2}, 0.0);
  Tensor flat = layer_norm(Tensor({1, 2}, {1.0, 1.0}), g, b);
  EXPECT_NEAR(flat[0], 0.0, 1e-9);
  EXPECT_NEAR(flat[1], 0.0, 1e-9);
  Tensor pm = layer_norm(Tensor({1, 2}, {-1.0, 1.0}), g, b);
  EXPECT_NEAR(pm[0], -1.0, 1e-5);
  EXPECT_NEAR(pm[1], 1.0, 1e-5);
  Tensor zero_gain = layer_norm(Tensor({1, 2}, {3.0, -7.0}), Tensor({2}, 0.0), Tensor({2}, {0.5, -0.25}));
  EXPECT_EQ(zero_gain[0], 0.5);
  EXPECT_EQ(zero_gain[1], -0.25);
}

TEST(Tensor, LayerNormIgnoresConstantShift) {
  Rng rng(4);
  Tensor x = Tensor::randn({3, 6}, rng), y = x;
  for (auto& v : y.data()) v += 42.0;
  Tensor g({6}, 1.0), b({6}, 0.0);
  Tensor a = layer_norm(x, g, b), c = layer_norm(y, g, b);
  for (std::size_t i = 0; i < a.numel(); ++i) EXPECT_NEAR(a[i], c[i], 1e-9);
}

TEST(Tensor, CosineSimilarityExamples) {
  const std::vector<double> a{1.0, 0.0}, b{1.0, 1.0}, c{0.0, 2.0};
  EXPECT_NEAR(cosine_similarity(a, a), 1.0, 1e-15);
  EXPECT_NEAR(cosine_similarity(a, c), 0.0, 1e-15);
  EXPECT_NEAR(cosine_similarity(a, b), 1.0 / std::sqrt(2.0), 1e-15);
  const std::vector<double> zero{0.0, 0.0};
  EXPECT_THROW(cosine_similarity(a, zero), DegenerateInputError);
}

TEST(Tensor, MatmulRejectsMismatchedShapes) {
  EXPECT_THROW(matmul(Tensor({2, 3}), Tensor({2, 3})), ShapeError);
}

TEST(Autodiff, SquareGradientAtThree) {
  Var x = Var::parameter(Tensor::scalar(3.0));
  ad::backward(ad::sum(ad::square(x)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(Autodiff, SoftmaxCrossEntropyGradientIsProbabilitiesMinusOneHot) {
  Var z = Var::parameter(Tensor({1, 3}, {0.3, -1.2, 2.0}));
  Tensor onehot({1, 3}, {0.0, 1.0, 0.0});
  ad::backward(ad::soft_cross_entropy(z, onehot));
  Tensor p = softmax(z.value(), 1);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(z.grad()[i], p[i] - onehot[i], 1e-14);
}

TEST(Autodiff, GradientsAccumulateAcrossBackwardCalls) {
  Var x = Var::parameter(Tensor::scalar(2.0));
  ad::backward(ad::sum(ad::square(x)));
  ad::backward(ad::sum(ad::square(x)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 8.0);
  x.zero_grad();
  EXPECT_DOUBLE_EQ(x.grad()[0], 0.0);
}

TEST(Autodiff, SharedSubexpressionGetsBothPaths) {
  Var x = Var::parameter(Tensor::scalar(1.5));
  Var y = ad::mul(x, x);
  ad::backward(ad::sum(ad::add(y, y)));
  EXPECT_DOUBLE_EQ(x.grad()[0], 6.0);
}

TEST(Autodiff, BackwardNeedsScalarLoss) {
  Var x = Var::parameter(Tensor({2}, 1.0));
  EXPECT_THROW(ad::backward(x), UsageError);
}

TEST(Autodiff, DropoutIsIdentityAtEvalAndInvertedAtTrain) {
  Rng rng(5);
  Var x = Var::constant(Tensor({4, 50}, 1.0));
  EXPECT_EQ(ad::dropout(x, 0.5, rng, false).value(), x.value());
  Tensor y = ad::dropout(x, 0.5, rng, true).value();
  for (double v : y.data()) EXPECT_TRUE(v == 0.0 || v == 2.0);
}

TEST(Autodiff, ForwardOpsAreBitDeterministic) {
  Rng a(9), b(9);
  Tensor x = Tensor::randn({6, 8}, a), y = Tensor::randn({6, 8}, b);
  Tensor g({8}, 1.0), bias({8}, 0.0);
  EXPECT_EQ(layer_norm(gelu(x), g, bias), layer_norm(gelu(y), g, bias));
}

TEST(Autodiff, EveryOpMatchesCentralDifferences) {
  for (const auto& c : grad_suite::run(200)) {
    EXPECT_EQ(c.result.probes, 200u) << c.name;
    EXPECT_LE(c.result.max_rel_error, 1e-4) << c.name;
  }
}
