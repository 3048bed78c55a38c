#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "tscnn/loss.hpp"

using namespace tscnn;
using D = Tensor<double>;

namespace {

FocalConfig cfg(double alpha = 0.9, double gamma = 2, double eps = 0) {
  FocalConfig c;
  c.alpha = alpha;
  c.gamma = gamma;
  c.epsilon = eps;
  return c;
}

// Per-pixel value of the focal loss written out by hand.
double focal_pixel(double y, double p, double a, double g, double e) {
  return -a * y * std::pow(1 - p, g) * std::log(p + e) - (1 - y) * (1 - a) * std::pow(p, g) * std::log(1 - p + e);
}

std::pair<D, D> random_batch(std::mt19937_64& rng, std::size_t n = 64) {
  std::uniform_real_distribution<double> u(0.01, 0.99);
  std::bernoulli_distribution b(0.15);
  D y({n}), p({n});
  for (std::size_t i = 0; i < n; ++i) {
    y.data()[i] = b(rng) ? 1 : 0;
    p.data()[i] = u(rng);
  }
  return {y, p};
}

}  // namespace

TEST(FocalLoss, PerfectPredictionsVanish) {
  EXPECT_EQ(focal_loss_map(D({1}, 1.0), D({1}, 1.0), cfg(0.9, 2, 1e-7))[0], 0.0);
  EXPECT_EQ(focal_loss_map(D({1}, 0.0), D({1}, 0.0), cfg(0.9, 2, 1e-7))[0], 0.0);
}

TEST(FocalLoss, HandArithmetic) {
  EXPECT_NEAR(focal_loss_map(D({1}, 1.0), D({1}, 0.5), cfg())[0], -0.9 * 0.25 * std::log(0.5), 1e-15);
  EXPECT_NEAR(focal_loss_map(D({1}, 1.0), D({1}, 0.5), cfg())[0], 0.15596, 1e-5);
}

TEST(FocalLoss, TabulatedCases) {
  for (double y : {0.0, 1.0})
    for (double p : {0.1, 0.5, 0.9}) {
      const double want = focal_pixel(y, p, 0.9, 2, 0);
      const double got = focal_loss_map(D({1}, y), D({1}, p), cfg())[0];
      EXPECT_LE(std::abs(got - want), 1e-9 * std::abs(want)) << y << " " << p;
    }
}

TEST(FocalLoss, MeanReduction) {
  D y({4}, std::vector<double>{1, 0, 1, 0}), p({4}, std::vector<double>{0.2, 0.3, 0.8, 0.6});
  double want = 0;
  for (int i = 0; i < 4; ++i) want += focal_pixel(y[i], p[i], 0.9, 2, 1e-7) / 4;
  EXPECT_NEAR(focal_loss(y, p, cfg(0.9, 2, 1e-7)).item(), want, 1e-15);
  EXPECT_THROW(focal_loss(D({3}), D({4}), cfg()), InvalidShape);
}

TEST(FocalConfig, Validation) {
  EXPECT_THROW(cfg(1.0).validate(), InvalidArgument);
  EXPECT_THROW(cfg(0.9, -1).validate(), InvalidArgument);
  EXPECT_THROW(cfg(0.9, 2, -1).validate(), InvalidArgument);
}

TEST(Components, MaskedByTruth) {
  auto t = sbfl_components(D({2}, std::vector<double>{1, 0}), D({2}, std::vector<double>{0.3, 0.5}), 2, 0);
  EXPECT_EQ(t.s0[0], 0.0);
  EXPECT_EQ(t.s1[1], 0.0);
  EXPECT_NEAR(t.s0[1], -0.25 * std::log(0.5), 1e-15);
  EXPECT_NEAR(t.s0[1], 0.17329, 1e-5);
}

TEST(Components, AlphaWeightsReconstructFocal) {
  std::mt19937_64 rng(1);
  for (int trial = 0; trial < 20; ++trial) {
    auto [y, p] = random_batch(rng);
    auto t = sbfl_components(y, p, 2, 1e-7);
    D fl = focal_loss_map(y, p, cfg(0.9, 2, 1e-7));
    for (std::size_t i = 0; i < y.size(); ++i) EXPECT_NEAR(0.9 * t.s1[i] + 0.1 * t.s0[i], fl[i], 1e-15);
  }
}

TEST(Components, NonNegativeUpToEpsilon) {
  const double eps = 1e-7;
  for (double y : {0.0, 1.0})
    for (double p : {0.0, 1e-9, 0.3, 1 - 1e-9, 1.0}) {
      auto t = sbfl_components(D({1}, y), D({1}, p), 2, eps);
      EXPECT_GE(t.s0[0], -eps);
      EXPECT_GE(t.s1[0], -eps);
    }
}

TEST(Components, LiteralSwitchUsesPrediction) {
  // With the literal masks, a background pixel contributes to the foreground term.
  auto t = sbfl_components(D({1}, 0.0), D({1}, 0.4), 2, 0, true);
  EXPECT_NEAR(t.s1[0], -0.4 * 0.36 * std::log(0.4), 1e-15);
  EXPECT_NEAR(t.s0[0], -0.6 * 0.16 * std::log(0.6), 1e-15);
}

TEST(Beta, Boundaries) {
  EXPECT_DOUBLE_EQ(balance_beta(3.0, 0.0), 0.9);
  EXPECT_EQ(balance_beta(0.0, 3.0), 0.5);
  EXPECT_DOUBLE_EQ(balance_beta(2.0, 2.0), 0.7);
  EXPECT_EQ(balance_beta(0.0, 0.0), 0.5);
  EXPECT_THROW(balance_beta(-1.0, 1.0), InvalidArgument);
  EXPECT_THROW(balance_beta(1.0, -1e-3), InvalidArgument);
}

TEST(Beta, RangeAndMonotonicity) {
  std::mt19937_64 rng(2);
  std::exponential_distribution<double> e(0.1);
  for (int i = 0; i < 1000; ++i) {
    const double s0 = e(rng), s1 = e(rng), d = e(rng);
    const double b = balance_beta(s0, s1);
    EXPECT_GE(b, 0.5);
    EXPECT_LE(b, 0.9);
    EXPECT_GE(balance_beta(s0 + d, s1), b - 1e-15);
    EXPECT_LE(balance_beta(s0, s1 + d), b + 1e-15);
  }
}

TEST(Beta, NeverRoundsPastUpperBound) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> mag(-300, 300);
  for (int i = 0; i < 100000; ++i) {
    const double s0 = std::pow(10.0, mag(rng) / 100), s1 = s0 * std::pow(10.0, -16 - mag(rng) / 30);
    EXPECT_LE(balance_beta(s0, s1), 0.9);
    EXPECT_GE(balance_beta(s1, s0), 0.5);
  }
}

TEST(Sbfl, AllBackgroundHalf) {
  D y({8}, 0.0), p({8}, 0.5);
  auto [total, r] = sbfl(y, p, cfg());
  EXPECT_DOUBLE_EQ(r.beta, 0.9);
  EXPECT_NEAR(total.item(), 0.1 * -0.25 * std::log(0.5), 1e-15);
  EXPECT_NEAR(r.sum_bg, 8 * -0.25 * std::log(0.5), 1e-13);
  EXPECT_EQ(r.sum_fg, 0.0);
}

TEST(Sbfl, PerfectPredictionNearZero) {
  D y({4}, std::vector<double>{1, 0, 0, 1});
  auto [total, r] = sbfl(y, y.detach(), cfg(0.9, 2, 1e-7));
  EXPECT_LT(std::abs(total.item()), 10 * 1e-7);
  EXPECT_EQ(r.beta, 0.5);
}

TEST(Sbfl, RecomposesFromComponents) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 20; ++trial) {
    auto [y, p] = random_batch(rng);
    auto [total, r] = sbfl(y, p, cfg(0.9, 2, 1e-7));
    auto t = sbfl_components(y, p, 2, 1e-7);
    double s0 = 0, s1 = 0, want = 0;
    for (std::size_t i = 0; i < y.size(); ++i) {
      s0 += t.s0[i];
      s1 += t.s1[i];
    }
    const double beta = 0.4 * s0 / (s0 + s1) + 0.5;
    for (std::size_t i = 0; i < y.size(); ++i) want += (beta * t.s1[i] + (1 - beta) * t.s0[i]) / y.size();
    EXPECT_NEAR(r.beta, beta, 1e-15);
    EXPECT_LE(std::abs(total.item() - want), 1e-9 * want);
    EXPECT_NEAR(r.total, total.item(), 0);
  }
}

TEST(Sbfl, EqualsFocalWithAlphaBeta) {
  std::mt19937_64 rng(4);
  for (int trial = 0; trial < 50; ++trial) {
    auto [y, p] = random_batch(rng);
    auto [total, r] = sbfl(y, p, cfg(0.9, 2, 1e-7));
    auto map_s = focal_loss_map(y, p, cfg(r.beta, 2, 1e-7));
    auto t = sbfl_components(y, p, 2, 1e-7);
    for (std::size_t i = 0; i < y.size(); ++i) {
      const double s = r.beta * t.s1[i] + (1 - r.beta) * t.s0[i];
      EXPECT_LE(std::abs(s - map_s[i]), 1e-6 * std::max(std::abs(s), 1e-300));
    }
    EXPECT_LE(std::abs(total.item() - focal_loss(y, p, cfg(r.beta, 2, 1e-7)).item()), 1e-6 * total.item());
  }
}

TEST(Sbfl, GradientWithFrozenBeta) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 20; ++trial) {
    auto [y, p0] = random_batch(rng, 4);
    D p = p0.detach().set_requires_grad(true);
    auto [total, r] = sbfl(y, p, cfg(0.9, 2, 1e-7));
    backward(total);
    const D fd = finite_diff_grad(
        [&](const D& q) { return sbfl_with_beta(y, q, cfg(0.9, 2, 1e-7), r.beta).item(); }, p0, 1e-6);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(p.grad()[i], fd[i], 1e-6);
  }
}

TEST(FocalReport, AlphaWeightedSums) {
  std::mt19937_64 rng(6);
  auto [y, p] = random_batch(rng);
  auto [total, r] = focal_loss_report(y, p, cfg(0.9, 2, 1e-7));
  auto t = sbfl_components(y, p, 2, 1e-7);
  EXPECT_NEAR(r.sum_fg, 0.9 * sum(t.s1).item(), 1e-12);
  EXPECT_NEAR(r.sum_bg, 0.1 * sum(t.s0).item(), 1e-12);
  EXPECT_EQ(r.beta, 0.9);
  EXPECT_NEAR(r.total, (r.sum_fg + r.sum_bg) / y.size(), 1e-12);
}
