#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "ddcn/reference.hpp"
#include "ddcn/si_loss.hpp"

using namespace ddcn;

namespace {

LogDepthPair<double> random_pair(std::size_t h, std::size_t w, Rng& rng, double log_scale = 0.0, bool holes = false) {
  Tensor4<double> truth(Shape4{1, 1, h, w}), pred(Shape4{1, 1, h, w});
  std::vector<std::uint8_t> mask(h * w, 1);
  for (std::size_t i = 0; i < truth.size(); ++i) {
    truth[i] = rng.uniform(0.5, 10.0);
    pred[i] = std::log(truth[i]) + rng.uniform(-0.5, 0.5) + log_scale;
    if (holes && rng.below(4) == 0) {
      mask[i] = 0;
      truth[i] = 0.0;
    }
  }
  mask[0] = mask[1] = 1;
  if (truth[0] == 0.0) truth[0] = 1.0;
  if (truth[1] == 0.0) truth[1] = 2.0;
  return {pred, truth, mask};
}

LogDepthPair<double> shifted(const LogDepthPair<double>& p, double log_c) {
  auto pred = p.y_pred();
  for (auto& v : pred.data()) v += log_c;
  return {pred, p.y_true(), p.mask()};
}

}  // namespace

TEST(Loss, ScaleInvariance) {
  Rng rng(1);
  for (int t = 0; t < 50; ++t) {
    const auto p = random_pair(1 + rng.below(8), 2 + rng.below(8), rng, 0.0, t % 2 == 1);
    const double base = loss_pairwise(p).loss;
    for (double c : {0.1, 1.0, std::numbers::e, 10.0}) {
      EXPECT_NEAR(loss_pairwise(shifted(p, std::log(c))).loss, base, 1e-9);
      EXPECT_NEAR(scale_invariant_D(shifted(p, std::log(c))), scale_invariant_D(p), 1e-9);
    }
  }
}

TEST(Loss, PairwiseEqualsReformulated) {
  Rng rng(2);
  for (std::size_t n = 2; n <= 64; ++n) {
    const auto p = random_pair(1, n, rng, rng.uniform(-2.0, 2.0));
    const double pair = reference::loss_pairwise_quadratic(p);
    EXPECT_LE(std::abs(pair - loss_reformulated(p)), 1e-10 * std::abs(pair)) << n;
    EXPECT_LE(std::abs(pair - loss_pairwise(p).loss), 1e-10 * std::abs(pair)) << n;
  }
}

TEST(Loss, AlphaBeatsEveryShift) {
  Rng rng(3);
  for (int t = 0; t < 20; ++t) {
    const auto p = random_pair(4, 5, rng, rng.uniform(-1.0, 1.0), true);
    const double a = alpha(p);
    const double best = shifted_error(p, a);
    for (int k = -400; k <= 400; ++k) EXPECT_GE(shifted_error(p, a + k * 0.005), best);
  }
}

TEST(Loss, DIsHalfOfL) {
  Rng rng(4);
  const auto p = random_pair(6, 6, rng, 0.3, true);
  EXPECT_NEAR(scale_invariant_D(p), loss_pairwise(p).loss / 2.0, 1e-12);
}

TEST(Loss, ScaledTruthHasZeroLossAndKnownAlpha) {
  Tensor4<double> truth(Shape4{1, 1, 2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor4<double> pred(truth.shape());
  for (std::size_t i = 0; i < pred.size(); ++i) pred[i] = std::log(std::numbers::e * truth[i]);
  const auto p = LogDepthPair<double>::from_depth(pred, truth);
  EXPECT_NEAR(alpha(p), -1.0, 1e-12);
  EXPECT_NEAR(scale_invariant_D(p), 0.0, 1e-15);
  EXPECT_NEAR(loss_pairwise(p).loss, 0.0, 1e-15);
}

TEST(Loss, ConstantPredictionGivesLogVariance) {
  Tensor4<double> truth(Shape4{1, 1, 1, 4}, {1, 2, 4, 8});
  const auto p = LogDepthPair<double>::from_depth(tensor_fill(truth.shape(), 0.7), truth);
  const double l2 = std::log(2.0);
  // log truth = {0, 1, 2, 3} * log 2, variance 1.25 * log(2)^2
  EXPECT_NEAR(loss_pairwise(p).loss, 1.25 * l2 * l2, 1e-12);
}

TEST(Loss, MaskedPixelsAreIgnored) {
  Rng rng(5);
  const auto p = random_pair(5, 5, rng, 0.0, true);
  auto pred = p.y_pred();
  for (std::size_t i = 0; i < pred.size(); ++i)
    if (!p.mask()[i]) pred[i] = 1e6;
  const LogDepthPair<double> q(pred, p.y_true(), p.mask());
  const auto r = loss_pairwise(q);
  EXPECT_EQ(r.loss, loss_pairwise(p).loss);
  for (std::size_t i = 0; i < pred.size(); ++i)
    if (!p.mask()[i]) {
      EXPECT_EQ(r.grad[i], 0.0);
      EXPECT_EQ(r.d_field[i], 0.0);
    }
}

TEST(Loss, GradientMatchesClosedForm) {
  Rng rng(6);
  const auto p = random_pair(3, 4, rng, 0.2, true);
  const auto r = loss_pairwise(p);
  const auto g = loss_gradient(p);
  double sum = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    EXPECT_NEAR(r.grad[i], g[i], 1e-15);
    sum += g[i];
  }
  EXPECT_NEAR(sum, 0.0, 1e-14);  // the loss ignores a global shift
}

TEST(Loss, DomainErrors) {
  const auto shape = Shape4{1, 1, 1, 3};
  EXPECT_THROW(LogDepthPair<double>(tensor_fill(shape, 0.0), Tensor4<double>(shape, {1, -1, 2}),
                                    std::vector<std::uint8_t>{1, 1, 1}),
               DomainError);
  const auto empty = LogDepthPair<double>::from_depth(tensor_fill(shape, 0.0), tensor_fill(shape, 0.0));
  EXPECT_THROW(loss_pairwise(empty), DomainError);
  EXPECT_THROW(alpha(empty), DomainError);
  const auto single = LogDepthPair<double>::from_depth(tensor_fill(shape, 0.0), Tensor4<double>(shape, {0, 0, 2}));
  EXPECT_THROW(loss_pairwise(single), DomainError);
  EXPECT_NO_THROW(alpha(single));
  EXPECT_THROW(LogDepthPair<double>(tensor_fill(shape, 0.0), tensor_fill(Shape4{1, 1, 3, 1}, 1.0),
                                    std::vector<std::uint8_t>(3, 1)),
               ShapeError);
}

TEST(Loss, TinyTruthIsClamped) {
  Tensor4<double> truth(Shape4{1, 1, 1, 2}, {1e-9, 1.0});
  const auto p = LogDepthPair<double>::from_depth(Tensor4<double>(truth.shape(), {std::log(1e-3), 0.0}), truth);
  EXPECT_NEAR(loss_pairwise(p).loss, 0.0, 1e-15);
}
