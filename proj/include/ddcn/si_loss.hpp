#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ddcn/errors.hpp"
#include "ddcn/tensor.hpp"

namespace ddcn {

// Ground truth below this depth (meters) is clamped before the logarithm.
inline constexpr double kMinDepth = 1e-3;

// Prediction in log-depth (natural log of meters) against ground-truth depth
// in meters. mask[i] != 0 marks pixels that take part in every sum.
template <Real T>
class LogDepthPair {
 public:
  LogDepthPair(Tensor4<T> y_pred, Tensor4<T> y_true, std::vector<std::uint8_t> mask)
      : y_pred_(std::move(y_pred)), y_true_(std::move(y_true)), mask_(std::move(mask)) {
    if (y_pred_.shape() != y_true_.shape())
      throw ShapeError("prediction " + y_pred_.shape().str() + " and ground truth " +
                       y_true_.shape().str() + " differ in shape");
    if (mask_.size() != y_true_.size())
      throw ShapeError("mask length " + std::to_string(mask_.size()) + " does not match " +
                       y_true_.shape().str());
    auto truth = y_true_.data();
    for (std::size_t i = 0; i < mask_.size(); ++i) {
      if (!mask_[i]) continue;
      if (!(truth[i] > T(0)) || !std::isfinite(static_cast<double>(truth[i])))
        throw DomainError("non-positive ground-truth depth " + std::to_string(truth[i]) +
                          " on a valid pixel (index " + std::to_string(i) + ")");
      ++n_valid_;
    }
  }

  // Mask derived from the ground truth: depth <= 0 marks a missing reading.
  static LogDepthPair from_depth(Tensor4<T> y_pred, Tensor4<T> y_true) {
    std::vector<std::uint8_t> mask(y_true.size());
    auto truth = y_true.data();
    for (std::size_t i = 0; i < mask.size(); ++i) mask[i] = truth[i] > T(0) ? 1 : 0;
    return LogDepthPair(std::move(y_pred), std::move(y_true), std::move(mask));
  }

  const Tensor4<T>& y_pred() const { return y_pred_; }
  const Tensor4<T>& y_true() const { return y_true_; }
  const std::vector<std::uint8_t>& mask() const { return mask_; }
  std::size_t n_valid() const { return n_valid_; }

  // d_i = log y_i - log y*_i on valid pixels, 0 elsewhere.
  std::vector<double> log_difference() const {
    std::vector<double> d(mask_.size(), 0.0);
    auto pred = y_pred_.data();
    auto truth = y_true_.data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      if (!mask_[i]) continue;
      const double log_truth = std::log(std::max(static_cast<double>(truth[i]), kMinDepth));
      d[i] = static_cast<double>(pred[i]) - log_truth;
    }
    return d;
  }

 private:
  Tensor4<T> y_pred_;
  Tensor4<T> y_true_;
  std::vector<std::uint8_t> mask_;
  std::size_t n_valid_ = 0;
};

template <Real T>
struct LossReport {
  double loss = 0.0;
  double alpha = 0.0;
  std::size_t n_valid = 0;
  Tensor4<T> d_field;  // 0 on masked pixels
  Tensor4<T> grad;     // dL/d y_pred, 0 on masked pixels
};

namespace detail {

template <Real T>
void require_valid(const LogDepthPair<T>& pair, std::size_t minimum) {
  if (pair.n_valid() < minimum) {
    if (pair.n_valid() == 0) throw DomainError("empty mask: no valid depth pixels");
    throw DomainError("pairwise loss needs at least " + std::to_string(minimum) +
                      " valid pixels, got " + std::to_string(pair.n_valid()));
  }
}

// Mean of d over valid pixels.
inline double masked_mean(const std::vector<double>& d, const std::vector<std::uint8_t>& mask,
                          std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i)
    if (mask[i]) s += d[i];
  return s / static_cast<double>(n);
}

}  // namespace detail

// Optimal log shift: (1/n) sum (log y*_i - log y_i).
template <Real T>
double alpha(const LogDepthPair<T>& pair) {
  detail::require_valid(pair, 1);
  return -detail::masked_mean(pair.log_difference(), pair.mask(), pair.n_valid());
}

// D evaluated with an arbitrary shift t; scale_invariant_D uses t = alpha.
template <Real T>
double shifted_error(const LogDepthPair<T>& pair, double shift) {
  detail::require_valid(pair, 1);
  const auto d = pair.log_difference();
  double s = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (!pair.mask()[i]) continue;
    const double e = d[i] + shift;
    s += e * e;
  }
  return s / (2.0 * static_cast<double>(pair.n_valid()));
}

template <Real T>
double scale_invariant_D(const LogDepthPair<T>& pair) {
  return shifted_error(pair, alpha(pair));
}

// (1/n) sum d_i^2 - (1/n^2) (sum d_i)^2, evaluated literally.
template <Real T>
double loss_reformulated(const LogDepthPair<T>& pair) {
  detail::require_valid(pair, 2);
  const auto d = pair.log_difference();
  double sq = 0.0, sum = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (!pair.mask()[i]) continue;
    sq += d[i] * d[i];
    sum += d[i];
  }
  const double n = static_cast<double>(pair.n_valid());
  return sq / n - (sum * sum) / (n * n);
}

// dL/dd_i = (2/n) d_i - (2/n^2) sum_j d_j, zero on masked pixels. Since
// d_i = y_pred_i - log y*_i this is also the gradient w.r.t. the prediction.
template <Real T>
Tensor4<T> loss_gradient(const LogDepthPair<T>& pair) {
  detail::require_valid(pair, 2);
  const auto d = pair.log_difference();
  const double n = static_cast<double>(pair.n_valid());
  const double mean = detail::masked_mean(d, pair.mask(), pair.n_valid());
  Tensor4<T> grad(pair.y_pred().shape());
  for (std::size_t i = 0; i < d.size(); ++i)
    if (pair.mask()[i]) grad[i] = static_cast<T>(2.0 / n * (d[i] - mean));
  return grad;
}

// Training loss (1/2n^2) sum_{i,j} ((log y_i - log y_j) - (log y*_i - log y*_j))^2,
// evaluated in O(n) as the variance of d (centered two-pass form of the
// reformulated loss, which keeps it non-negative under round-off).
template <Real T>
LossReport<T> loss_pairwise(const LogDepthPair<T>& pair) {
  detail::require_valid(pair, 2);
  const auto d = pair.log_difference();
  const double n = static_cast<double>(pair.n_valid());
  const double mean = detail::masked_mean(d, pair.mask(), pair.n_valid());

  LossReport<T> report;
  report.n_valid = pair.n_valid();
  report.alpha = -mean;
  report.d_field = Tensor4<T>(pair.y_pred().shape());
  report.grad = Tensor4<T>(pair.y_pred().shape());
  double var = 0.0;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (!pair.mask()[i]) continue;
    const double centered = d[i] - mean;
    var += centered * centered;
    report.d_field[i] = static_cast<T>(d[i]);
    report.grad[i] = static_cast<T>(2.0 / n * centered);
  }
  report.loss = var / n;
  return report;
}

}  // namespace ddcn
