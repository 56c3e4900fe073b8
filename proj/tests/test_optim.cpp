// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "icmlp/errors.hpp"
#include "icmlp/optim.hpp"
#include "test_support.hpp"

namespace icmlp {
namespace {

using testing::random_tensor;

TEST(Kaiming, BoundForSmallFanIn) {
  EXPECT_DOUBLE_EQ(kaiming_bound(6), 1.0);
  Rng rng(1);
  const Tensor w = kaiming_uniform_init(rng, 6, 20, 6);
  for (double v : w.data()) EXPECT_LT(std::abs(v), 1.0);
}

TEST(Kaiming, BoundForEmbeddingWidth) {
  EXPECT_NEAR(kaiming_bound(512), std::sqrt(6.0 / 512.0), 1e-15);
  EXPECT_NEAR(kaiming_bound(512), 0.108253, 1e-6);
}

TEST(Kaiming, SampleVarianceMatchesUniform) {
  Rng rng(2);
  const Tensor w = kaiming_uniform_init(rng, 512, 1, 100000);
  double sum = 0.0, sq = 0.0;
  for (double v : w.data()) {
    sum += v;
    sq += v * v;
  }
  const double n = static_cast<double>(w.size());
  const double var = sq / n - (sum / n) * (sum / n);
  const double b = kaiming_bound(512);
  EXPECT_NEAR(var, b * b / 3.0, 0.05 * b * b / 3.0);
}

TEST(Kaiming, ZeroFanInRejected) {
  Rng rng(0);
  EXPECT_THROW(kaiming_bound(0), ParameterError);
  EXPECT_THROW(kaiming_uniform_init(rng, 0, 1, 1), ParameterError);
}

TEST(AdamW, ZeroGradientNoDecayLeavesParams) {
  Rng rng(3);
  Tensor w = random_tensor(rng, 3, 3);
  const Tensor before = w;
  AdamW opt({.lr = 0.1, .weight_decay = 0.0});
  for (int i = 0; i < 5; ++i) opt.step(w, Tensor(3, 3));
  EXPECT_EQ(w, before);
}

TEST(AdamW, ZeroGradientIsPureDecay) {
  Rng rng(4);
  Tensor w = random_tensor(rng, 4, 2);
  const Tensor w0 = w;
  const double lr = 0.05, lambda = 0.01;
  AdamW opt({.lr = lr, .weight_decay = lambda});
  const int k = 7;
  for (int i = 0; i < k; ++i) opt.step(w, Tensor(4, 2));
  for (std::size_t i = 0; i < w.size(); ++i) {
    double expect = w0[i];
    for (int s = 0; s < k; ++s) expect *= (1.0 - lr * lambda);
    EXPECT_EQ(w[i], expect);
  }
}

TEST(AdamW, FirstStepHandOracle) {
  // Bias correction makes m_hat = g and v_hat = g^2 on step one.
  Tensor w{{1.0}};
  AdamW opt({.lr = 0.1, .weight_decay = 0.0});
  opt.step(w, Tensor{{1.0}});
  EXPECT_NEAR(w[0], 1.0 - 0.1 * (1.0 / (1.0 + 1e-8)), 1e-15);
  EXPECT_NEAR(w[0], 0.9, 1e-8);
}

// Plain Adam written from the textbook recurrences.
struct ReferenceAdam {
  double lr, b1 = 0.9, b2 = 0.999, eps = 1e-8;
  std::vector<double> m, v;
  int t = 0;

  void step(std::vector<double>& w, const std::vector<double>& g) {
    if (m.empty()) {
      m.assign(w.size(), 0.0);
      v.assign(w.size(), 0.0);
    }
    ++t;
    for (std::size_t i = 0; i < w.size(); ++i) {
      m[i] = b1 * m[i] + (1 - b1) * g[i];
      v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
      const double mh = m[i] / (1 - std::pow(b1, t));
      const double vh = v[i] / (1 - std::pow(b2, t));
      w[i] -= lr * mh / (std::sqrt(vh) + eps);
    }
  }
};

TEST(AdamW, NoDecayMatchesAdam) {
  Rng rng(5);
  Tensor w = random_tensor(rng, 3, 4);
  std::vector<double> ref = w.data();
  AdamW opt({.lr = 3e-3, .weight_decay = 0.0});
  ReferenceAdam adam{.lr = 3e-3};
  for (int step = 0; step < 50; ++step) {
    const Tensor g = random_tensor(rng, 3, 4, -2, 2);
    opt.step(w, g);
    adam.step(ref, g.data());
  }
  for (std::size_t i = 0; i < w.size(); ++i) EXPECT_NEAR(w[i], ref[i], 1e-12);
}

TEST(AdamW, ParameterListStepsEachTensor) {
  Rng rng(6);
  Tensor a = random_tensor(rng, 2, 2), ga = random_tensor(rng, 2, 2);
  Tensor b = random_tensor(rng, 1, 3), gb = random_tensor(rng, 1, 3);
  Tensor a2 = a, b2 = b;
  const std::vector<ParamRef> params{{&a, &ga}, {&b, &gb}};
  AdamW joint({.lr = 0.01, .weight_decay = 0.1});
  AdamW sa({.lr = 0.01, .weight_decay = 0.1}), sb({.lr = 0.01, .weight_decay = 0.1});
  joint.step(params);
  sa.step(a2, ga);
  sb.step(b2, gb);
  EXPECT_EQ(a, a2);
  EXPECT_EQ(b, b2);
  EXPECT_EQ(joint.step_count(), 1u);
}

TEST(AdamW, GradientShapeMismatchThrows) {
  Tensor w(2, 2);
  AdamW opt;
  EXPECT_THROW(opt.step(w, Tensor(2, 3)), DimensionError);
}

TEST(ExponentialLr, EpochZeroIsInitial) {
  EXPECT_EQ((ExponentialLr{0.02, 0.06}.lr_at_epoch(0)), 0.02);
}

TEST(ExponentialLr, TunedSchedules) {
  EXPECT_NEAR((ExponentialLr{2e-2, 6e-2}.lr_at_epoch(1)), 1.2e-3, 1e-15);
  EXPECT_NEAR((ExponentialLr{2e-3, 4e-1}.lr_at_epoch(2)), 3.2e-4, 1e-15);
}

}  // namespace
}  // namespace icmlp
