// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <vector>

#include "icmlp/errors.hpp"
#include "icmlp/layers.hpp"
#include "test_support.hpp"

namespace icmlp {
namespace {

using testing::dot;
using testing::max_fd_error;
using testing::random_tensor;

LinearLayer random_linear(Rng& rng, std::size_t in, std::size_t out) {
  LinearLayer layer(in, out);
  layer.weight() = random_tensor(rng, out, in);
  layer.bias() = random_tensor(rng, 1, out);
  return layer;
}

// ---------------------------------------------------------------- Linear

TEST(Linear, IdentityWeightPassesInputThrough) {
  LinearLayer layer(3, 3);
  layer.weight() = Tensor::identity(3);
  const Tensor x{{1, -2, 3}, {0.5, 0, 4}};
  EXPECT_EQ(layer.forward(x), x);
}

TEST(Linear, ZeroWeightEmitsBias) {
  LinearLayer layer(4, 2);
  layer.bias() = Tensor{{3, 3}};
  const Tensor y = layer.forward(Tensor(5, 4, 1.7));
  for (std::size_t r = 0; r < 5; ++r) EXPECT_EQ(y.row(r)[0], 3.0);
}

TEST(Linear, HandExpansion) {
  LinearLayer layer(2, 2);
  layer.weight() = Tensor{{1, 2}, {3, 4}};
  EXPECT_EQ(layer.forward(Tensor{{1, 1}}), (Tensor{{3, 7}}));
}

TEST(Linear, WrongInputWidthThrows) {
  LinearLayer layer(3, 2);
  EXPECT_THROW(layer.forward(Tensor(1, 4)), DimensionError);
}

TEST(Linear, BackwardBeforeForwardThrows) {
  LinearLayer layer(3, 2);
  EXPECT_THROW(layer.backward(Tensor(1, 2)), StateError);
}

TEST(Linear, ZeroUpstreamGradient) {
  Rng rng(1);
  LinearLayer layer = random_linear(rng, 3, 4);
  layer.forward(random_tensor(rng, 2, 3));
  const Tensor gx = layer.backward(Tensor(2, 4));
  EXPECT_EQ(gx, Tensor(2, 3));
  EXPECT_EQ(layer.grad_weight(), Tensor(4, 3));
  EXPECT_EQ(layer.grad_bias(), Tensor(1, 4));
}

TEST(Linear, IdentityWeightPassesGradientThrough) {
  LinearLayer layer(3, 3);
  layer.weight() = Tensor::identity(3);
  Rng rng(2);
  layer.forward(random_tensor(rng, 2, 3));
  const Tensor g = random_tensor(rng, 2, 3);
  EXPECT_EQ(layer.backward(g), g);
}

TEST(Linear, GradientsAccumulateUntilZeroed) {
  Rng rng(3);
  LinearLayer layer = random_linear(rng, 3, 2);
  const Tensor x = random_tensor(rng, 4, 3);
  const Tensor g = random_tensor(rng, 4, 2);
  layer.forward(x);
  layer.backward(g);
  const Tensor once = layer.grad_weight();
  layer.forward(x);
  layer.backward(g);
  EXPECT_LT(testing::max_abs_diff(layer.grad_weight(), scale(once, 2.0)), 1e-14);
  layer.zero_grads();
  EXPECT_EQ(layer.grad_weight(), Tensor(2, 3));
}

TEST(Linear, FiniteDifferences) {
  Rng rng(4);
  LinearLayer layer = random_linear(rng, 4, 3);
  Tensor x = random_tensor(rng, 5, 4);
  const Tensor probe = random_tensor(rng, 5, 3);

  layer.forward(x);
  const Tensor gx = layer.backward(probe);
  const Tensor gw = layer.grad_weight();
  const Tensor gb = layer.grad_bias();

  auto loss = [&] { return dot(layer.apply(x), probe); };
  EXPECT_LT(max_fd_error(x, gx, loss), 1e-6);
  EXPECT_LT(max_fd_error(layer.weight(), gw, loss), 1e-6);
  EXPECT_LT(max_fd_error(layer.bias(), gb, loss), 1e-6);
}

// ----------------------------------------------------------- Linearity

TEST(Linearity, UnitScalarAndZero) {
  Rng rng(5);
  const LinearLayer layer = random_linear(rng, 3, 3);
  const Tensor x = random_tensor(rng, 2, 3);
  const Tensor y = random_tensor(rng, 2, 3);
  EXPECT_TRUE(check_linearity(layer, x, y, 1.0));
  EXPECT_TRUE(check_linearity(layer, x, y, 0.0));
}

TEST(Linearity, RandomLayersHold) {
  Rng rng(6);
  for (int trial = 0; trial < 10; ++trial) {
    const LinearLayer layer = random_linear(rng, 6, 4);
    const Tensor x = random_tensor(rng, 3, 6, -5, 5);
    const Tensor y = random_tensor(rng, 3, 6, -5, 5);
    EXPECT_TRUE(check_linearity(layer, x, y, -3.0 + 6.0 * rng.next_double()));
  }
}

// ----------------------------------------------------------- BatchNorm

TEST(BatchNorm, ConstantBatchNormalizesToZero) {
  BatchNormLayer bn(3);
  const Tensor y = bn.forward(Tensor(4, 3, 2.5), Mode::Train);
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(BatchNorm, HandComputedStandardization) {
  // mean 2, biased variance 2/3, so the outputs are +-1/sqrt(2/3).
  BatchNormLayer bn(1, 0.0);
  const Tensor y = bn.forward(Tensor{{1}, {2}, {3}}, Mode::Train);
  const double z = 1.0 / std::sqrt(2.0 / 3.0);
  EXPECT_NEAR(y[0], -z, 1e-12);
  EXPECT_NEAR(y[1], 0.0, 1e-12);
  EXPECT_NEAR(y[2], z, 1e-12);
  EXPECT_NEAR(y[2], 1.2247, 1e-3);
}

TEST(BatchNorm, FreshEvalIsAffineOnly) {
  BatchNormLayer bn(2, 0.0);
  bn.gamma() = Tensor{{2, -1}};
  bn.beta() = Tensor{{0.5, 3}};
  const Tensor x{{1, 2}, {-3, 4}};
  EXPECT_EQ(bn.forward(x, Mode::Eval), (Tensor{{2.5, 1}, {-5.5, -1}}));
}

TEST(BatchNorm, RunningStatsUseUnbiasedVariance) {
  BatchNormLayer bn(1, 1e-5, 0.1);
  bn.forward(Tensor{{1}, {2}, {3}}, Mode::Train);
  EXPECT_NEAR(bn.running_mean()[0], 0.1 * 2.0, 1e-15);
  EXPECT_NEAR(bn.running_var()[0], 0.9 * 1.0 + 0.1 * 1.0, 1e-15);  // unbiased var of {1,2,3} is 1
}

TEST(BatchNorm, EvalDoesNotMutateRunningStats) {
  BatchNormLayer bn(2);
  Rng rng(7);
  bn.forward(random_tensor(rng, 6, 2), Mode::Train);
  const Tensor mean = bn.running_mean();
  const Tensor var = bn.running_var();
  bn.forward(random_tensor(rng, 6, 2), Mode::Eval);
  EXPECT_EQ(bn.running_mean(), mean);
  EXPECT_EQ(bn.running_var(), var);
}

TEST(BatchNorm, SingleRowTrainBatchRejected) {
  BatchNormLayer bn(3);
  EXPECT_THROW(bn.forward(Tensor(1, 3), Mode::Train), BatchSizeError);
}

TEST(BatchNorm, BackwardAfterEvalForwardThrows) {
  BatchNormLayer bn(2);
  bn.forward(Tensor(3, 2), Mode::Eval);
  EXPECT_THROW(bn.backward(Tensor(3, 2)), StateError);
}

TEST(BatchNorm, ZeroUpstreamGradient) {
  BatchNormLayer bn(3);
  Rng rng(8);
  bn.forward(random_tensor(rng, 4, 3), Mode::Train);
  EXPECT_EQ(bn.backward(Tensor(4, 3)), Tensor(4, 3));
}

TEST(BatchNorm, InputGradientSumsToZeroPerFeature) {
  Rng rng(9);
  BatchNormLayer bn(3);
  bn.gamma() = random_tensor(rng, 1, 3, 0.5, 2.0);
  bn.forward(random_tensor(rng, 6, 3, -2, 2), Mode::Train);
  const Tensor gx = bn.backward(random_tensor(rng, 6, 3));
  const Tensor sums = column_sum(gx);
  for (double s : sums.data()) EXPECT_NEAR(s, 0.0, 1e-12);
}

TEST(BatchNorm, FiniteDifferences) {
  Rng rng(10);
  BatchNormLayer bn(3);
  bn.gamma() = random_tensor(rng, 1, 3, 0.5, 2.0);
  bn.beta() = random_tensor(rng, 1, 3);
  Tensor x = random_tensor(rng, 4, 3, -2, 2);
  const Tensor probe = random_tensor(rng, 4, 3);

  bn.forward(x, Mode::Train);
  const Tensor gx = bn.backward(probe);
  const Tensor gg = bn.grad_gamma();
  const Tensor gb = bn.grad_beta();

  // Train-mode output depends only on the batch, so re-running the forward
  // is a pure function of (x, gamma, beta).
  auto loss = [&] { return dot(bn.forward(x, Mode::Train), probe); };
  EXPECT_LT(max_fd_error(x, gx, loss), 1e-6);
  EXPECT_LT(max_fd_error(bn.gamma(), gg, loss), 1e-6);
  EXPECT_LT(max_fd_error(bn.beta(), gb, loss), 1e-6);
}

// ------------------------------------------------------------- Dropout

TEST(Dropout, ZeroProbabilityIsIdentityInEveryMode) {
  DropoutLayer d(0.0);
  Rng rng(11);
  const Tensor x = random_tensor(rng, 3, 4);
  EXPECT_EQ(d.forward(x, Mode::Train, rng), x);
  EXPECT_EQ(d.forward(x, Mode::Eval, rng), x);
}

TEST(Dropout, EvalIsIdentity) {
  DropoutLayer d(0.7);
  Rng rng(12);
  const Tensor x = random_tensor(rng, 3, 4);
  EXPECT_EQ(d.forward(x, Mode::Eval, rng), x);
}

TEST(Dropout, TrainPreservesExpectation) {
  DropoutLayer d(0.05);
  Rng rng(13);
  const Tensor y = d.forward(Tensor(1, 10000, 1.0), Mode::Train, rng);
  double mean = 0.0;
  for (double v : y.data()) mean += v;
  mean /= 10000.0;
  EXPECT_NEAR(mean, 1.0, 0.01);
}

TEST(Dropout, InvalidProbabilityRejected) {
  EXPECT_THROW(DropoutLayer(1.0), ParameterError);
  EXPECT_THROW(DropoutLayer(-0.1), ParameterError);
}

TEST(Dropout, AllOnesMaskPassesGradient) {
  DropoutLayer d(0.0);
  d.set_mask(Tensor(2, 3, 1.0));
  Rng rng(14);
  const Tensor g = random_tensor(rng, 2, 3);
  EXPECT_EQ(d.backward(g), g);
}

TEST(Dropout, AllZeroMaskBlocksGradient) {
  DropoutLayer d(0.5);
  d.set_mask(Tensor(2, 3, 0.0));
  Rng rng(15);
  EXPECT_EQ(d.backward(random_tensor(rng, 2, 3)), Tensor(2, 3));
}

TEST(Dropout, FrozenMaskFiniteDifferences) {
  DropoutLayer d(0.3);
  Rng rng(16);
  Tensor x = random_tensor(rng, 4, 5);
  const Tensor probe = random_tensor(rng, 4, 5);
  d.forward(x, Mode::Train, rng);
  d.set_frozen(true);
  const Tensor gx = d.backward(probe);
  auto loss = [&] { return dot(d.forward(x, Mode::Train, rng), probe); };
  EXPECT_LT(max_fd_error(x, gx, loss), 1e-6);
}

TEST(Dropout, SampleLeavesCacheAlone) {
  DropoutLayer d(0.5);
  Rng rng(17);
  const Tensor x(2, 2, 1.0);
  d.sample(x, rng);
  EXPECT_FALSE(d.mask().has_value());
}

// ---------------------------------------------------------------- ReLU

TEST(Relu, Definition) {
  ReluLayer relu;
  EXPECT_EQ(relu.forward(Tensor{{-1, 0, 2}}), (Tensor{{0, 0, 2}}));
}

TEST(Relu, PositiveRegionIsIdentity) {
  ReluLayer relu;
  Rng rng(18);
  const Tensor x = random_tensor(rng, 3, 3, 0.1, 2.0);
  EXPECT_EQ(relu.forward(x), x);
  const Tensor g = random_tensor(rng, 3, 3);
  EXPECT_EQ(relu.backward(g), g);
}

TEST(Relu, FiniteDifferencesAwayFromKink) {
  ReluLayer relu;
  Rng rng(19);
  Tensor x = random_tensor(rng, 4, 4);
  for (double& v : x.data()) {
    if (std::abs(v) < 0.05) v = 0.5;
  }
  const Tensor probe = random_tensor(rng, 4, 4);
  relu.forward(x);
  const Tensor gx = relu.backward(probe);
  auto loss = [&] { return dot(ReluLayer::apply(x), probe); };
  EXPECT_LT(max_fd_error(x, gx, loss), 1e-6);
}

// ------------------------------------------------------ Cross entropy

TEST(CrossEntropy, UniformLogitsGiveLogTwo) {
  const std::vector<int> labels{0};
  EXPECT_NEAR(softmax_cross_entropy(Tensor{{0, 0}}, labels).loss, std::log(2.0), 1e-15);
  EXPECT_NEAR(softmax_cross_entropy(Tensor{{0, 0}}, labels).loss, 0.6931, 1e-4);
}

TEST(CrossEntropy, HugeMarginIsStable) {
  const std::vector<int> labels{0};
  const LossResult r = softmax_cross_entropy(Tensor{{1000, -1000}}, labels);
  EXPECT_TRUE(std::isfinite(r.loss));
  EXPECT_NEAR(r.loss, 0.0, 1e-12);
  EXPECT_TRUE(r.grad_logits.all_finite());
}

TEST(CrossEntropy, ThreeClassFormula) {
  const std::vector<int> labels{2};
  const double expect = std::log(1.0 + std::exp(-1.0) + std::exp(-2.0));
  EXPECT_NEAR(softmax_cross_entropy(Tensor{{1, 2, 3}}, labels).loss, expect, 1e-14);
  EXPECT_NEAR(expect, 0.40761, 1e-5);
}

TEST(CrossEntropy, BadLabelRejected) {
  const std::vector<int> too_big{2};
  const std::vector<int> negative{-1};
  EXPECT_THROW(softmax_cross_entropy(Tensor{{0, 0}}, too_big), LabelError);
  EXPECT_THROW(softmax_cross_entropy(Tensor{{0, 0}}, negative), LabelError);
}

TEST(CrossEntropy, GradientMatchesFiniteDifferences) {
  Rng rng(20);
  Tensor logits = random_tensor(rng, 5, 4, -3, 3);
  const std::vector<int> labels{0, 3, 1, 1, 2};
  const Tensor g = softmax_cross_entropy(logits, labels).grad_logits;
  auto loss = [&] { return softmax_cross_entropy(logits, labels).loss; };
  EXPECT_LT(max_fd_error(logits, g, loss), 1e-6);
}

TEST(Softmax, RowsSumToOne) {
  Rng rng(21);
  const Tensor p = softmax(random_tensor(rng, 6, 5, -20, 20));
  for (std::size_t r = 0; r < 6; ++r) {
    double s = 0.0;
    for (double v : p.row(r)) {
      EXPECT_GE(v, 0.0);
      s += v;
    }
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

}  // namespace
}  // namespace icmlp
