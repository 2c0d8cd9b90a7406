#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include "ddcn/conv.hpp"
#include "ddcn/layers.hpp"
#include "ddcn/si_loss.hpp"
#include "ddcn/tensor.hpp"

// Central finite differences against the analytic backward passes, 64-bit only.
namespace ddcn::gradcheck {

inline constexpr double kStep = 1e-5;
inline constexpr double kTolerance = 1e-4;
inline constexpr double kLossTolerance = 1e-6;
// Denominator floor for the relative error, so coordinates whose true
// gradient is exactly zero compare on an absolute scale.
inline constexpr double kFloor = 1e-8;

struct OpResult {
  std::string op;
  std::size_t instances = 0;
  std::size_t coordinates = 0;
  double max_rel_error = 0.0;
  double tolerance = kTolerance;
  bool pass() const { return max_rel_error <= tolerance; }
};

inline double relative_error(double analytic, double numeric) {
  const double denom = std::max({std::abs(analytic), std::abs(numeric), kFloor});
  return std::abs(analytic - numeric) / denom;
}

// One differentiable instance: perturbable inputs, the scalar objective, and
// its analytic gradient with respect to each input (same order).
struct Instance {
  std::vector<std::span<double>> inputs;
  std::function<double()> objective;
  std::function<std::vector<std::vector<double>>()> analytic;
};

inline double check_instance(const Instance& inst) {
  const auto grads = inst.analytic();
  double worst = 0.0;
  for (std::size_t k = 0; k < inst.inputs.size(); ++k) {
    auto x = inst.inputs[k];
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double saved = x[i];
      x[i] = saved + kStep;
      const double up = inst.objective();
      x[i] = saved - kStep;
      const double down = inst.objective();
      x[i] = saved;
      worst = std::max(worst, relative_error(grads[k][i], (up - down) / (2.0 * kStep)));
    }
  }
  return worst;
}

namespace detail {

inline Tensor4<double> random_tensor(Shape4 s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor4<double> t(s);
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

inline std::size_t pick(Rng& rng, std::size_t lo, std::size_t hi) { return lo + rng.below(hi - lo + 1); }

inline double dot(const Tensor4<double>& a, const Tensor4<double>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline std::vector<double> to_vec(const Tensor4<double>& t) { return {t.data().begin(), t.data().end()}; }

// Values that stay at least `gap` apart (and away from zero by gap/2), so no
// perturbation of size kStep can flip a max or a ReLU kink.
inline Tensor4<double> separated_tensor(Shape4 s, Rng& rng, double gap = 1e-2) {
  Tensor4<double> t(s);
  std::vector<double> v(t.size());
  for (std::size_t i = 0; i < v.size(); ++i)
    v[i] = (static_cast<double>(i) - static_cast<double>(v.size() / 2) + 0.5) * gap;
  for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[rng.below(i)]);
  std::copy(v.begin(), v.end(), t.data().begin());
  return t;
}

}  // namespace detail

// Each generator owns its tensors through a shared state captured by the closures.

inline Instance conv_instance(Rng& rng) {
  struct State {
    Tensor4<double> x;
    ConvParams<double> p;
    Tensor4<double> r;
  };
  auto st = std::make_shared<State>();
  const std::size_t k = 1 + 2 * detail::pick(rng, 0, 2);
  const std::size_t l = detail::pick(rng, 1, 3);
  const std::size_t stride = detail::pick(rng, 1, 2);
  const Shape4 in{detail::pick(rng, 1, 2), detail::pick(rng, 1, 3), detail::pick(rng, 3, 7), detail::pick(rng, 3, 7)};
  const std::size_t out = detail::pick(rng, 1, 3);
  st->x = detail::random_tensor(in, rng);
  st->p.weights = detail::random_tensor(Shape4{out, in.c, k, k}, rng);
  st->p.bias.resize(out);
  for (auto& b : st->p.bias) b = rng.uniform(-1.0, 1.0);
  st->p.dilation = l;
  st->p.stride = stride;
  st->p.padding = same_padding(k, k, l);
  const auto y = conv2d_dilated(st->x, st->p);
  st->r = detail::random_tensor(y.output.shape(), rng);
  return {{st->x.data(), st->p.weights.data(), std::span<double>(st->p.bias)},
          [st] { return detail::dot(conv2d_dilated(st->x, st->p).output, st->r); },
          [st] {
            const auto g = conv2d_dilated(st->x, st->p).backward(st->r);
            return std::vector<std::vector<double>>{detail::to_vec(g.d_input), detail::to_vec(g.d_weights),
                                                    g.d_bias};
          }};
}

inline Instance relu_instance(Rng& rng) {
  struct State {
    Tensor4<double> x, r;
  };
  auto st = std::make_shared<State>();
  const Shape4 s{detail::pick(rng, 1, 2), detail::pick(rng, 1, 3), detail::pick(rng, 2, 6), detail::pick(rng, 2, 6)};
  st->x = detail::separated_tensor(s, rng);
  st->r = detail::random_tensor(s, rng);
  return {{st->x.data()},
          [st] { return detail::dot(relu(st->x).output, st->r); },
          [st] { return std::vector<std::vector<double>>{detail::to_vec(relu(st->x).backward(st->r))}; }};
}

inline Instance maxpool_instance(Rng& rng) {
  struct State {
    Tensor4<double> x, r;
    Window2 window, stride;
    Padding pad;
  };
  auto st = std::make_shared<State>();
  const Shape4 s{detail::pick(rng, 1, 2), detail::pick(rng, 1, 2), detail::pick(rng, 3, 7), detail::pick(rng, 3, 7)};
  st->window = {detail::pick(rng, 2, 3), detail::pick(rng, 2, 3)};
  st->stride = {detail::pick(rng, 1, 2), detail::pick(rng, 1, 2)};
  if (rng.below(2) == 1) st->pad = {(st->window.h - 1) / 2, (st->window.w - 1) / 2};
  st->x = detail::separated_tensor(s, rng);
  st->r = detail::random_tensor(maxpool2d(st->x, st->window, st->stride, st->pad).output.shape(), rng);
  return {{st->x.data()},
          [st] { return detail::dot(maxpool2d(st->x, st->window, st->stride, st->pad).output, st->r); },
          [st] {
            return std::vector<std::vector<double>>{
                detail::to_vec(maxpool2d(st->x, st->window, st->stride, st->pad).backward(st->r))};
          }};
}

inline Instance upsample_instance(Rng& rng) {
  struct State {
    Tensor4<double> x, r;
    Window2 factor;
  };
  auto st = std::make_shared<State>();
  const Shape4 s{detail::pick(rng, 1, 2), detail::pick(rng, 1, 3), detail::pick(rng, 1, 4), detail::pick(rng, 1, 4)};
  st->factor = {detail::pick(rng, 1, 3), detail::pick(rng, 1, 3)};
  st->x = detail::random_tensor(s, rng);
  st->r = detail::random_tensor(upsample_nearest(st->x, st->factor).output.shape(), rng);
  return {{st->x.data()},
          [st] { return detail::dot(upsample_nearest(st->x, st->factor).output, st->r); },
          [st] {
            return std::vector<std::vector<double>>{
                detail::to_vec(upsample_nearest(st->x, st->factor).backward(st->r))};
          }};
}

inline Instance concat_instance(Rng& rng) {
  struct State {
    Tensor4<double> a, b, r;
  };
  auto st = std::make_shared<State>();
  const std::size_t n = detail::pick(rng, 1, 2), h = detail::pick(rng, 1, 5), w = detail::pick(rng, 1, 5);
  st->a = detail::random_tensor(Shape4{n, detail::pick(rng, 1, 3), h, w}, rng);
  st->b = detail::random_tensor(Shape4{n, detail::pick(rng, 1, 3), h, w}, rng);
  st->r = detail::random_tensor(concat_channels(st->a, st->b).output.shape(), rng);
  return {{st->a.data(), st->b.data()},
          [st] { return detail::dot(concat_channels(st->a, st->b).output, st->r); },
          [st] {
            const auto [da, db] = concat_channels(st->a, st->b).backward(st->r);
            return std::vector<std::vector<double>>{detail::to_vec(da), detail::to_vec(db)};
          }};
}

inline Instance dense_instance(Rng& rng) {
  struct State {
    Tensor4<double> x, r;
    DenseParams<double> p;
  };
  auto st = std::make_shared<State>();
  const Shape4 s{detail::pick(rng, 1, 3), detail::pick(rng, 1, 3), detail::pick(rng, 1, 4), detail::pick(rng, 1, 4)};
  const std::size_t out = detail::pick(rng, 1, 4);
  st->x = detail::random_tensor(s, rng);
  st->p.weights = detail::random_tensor(Shape4{out, s.c, s.h, s.w}, rng);
  st->p.bias.resize(out);
  for (auto& b : st->p.bias) b = rng.uniform(-1.0, 1.0);
  st->r = detail::random_tensor(Shape4{s.n, out, 1, 1}, rng);
  return {{st->x.data(), st->p.weights.data(), std::span<double>(st->p.bias)},
          [st] { return detail::dot(dense(st->x, st->p).output, st->r); },
          [st] {
            const auto g = dense(st->x, st->p).backward(st->r);
            return std::vector<std::vector<double>>{detail::to_vec(g.d_input), detail::to_vec(g.d_weights),
                                                    g.d_bias};
          }};
}

// Objective is the loss itself, differentiated w.r.t. the log-depth prediction.
inline Instance loss_instance(Rng& rng) {
  struct State {
    Tensor4<double> pred, truth;
    std::vector<std::uint8_t> mask;
  };
  auto st = std::make_shared<State>();
  const Shape4 s{1, 1, detail::pick(rng, 2, 8), detail::pick(rng, 2, 8)};
  st->pred = detail::random_tensor(s, rng, -1.0, 2.5);
  st->truth = detail::random_tensor(s, rng, 0.5, 10.0);
  st->mask.assign(st->truth.size(), 1);
  for (auto& m : st->mask)
    if (rng.below(5) == 0) m = 0;
  st->mask[0] = st->mask[1] = 1;
  return {{st->pred.data()},
          [st] { return loss_pairwise(LogDepthPair<double>(st->pred, st->truth, st->mask)).loss; },
          [st] {
            return std::vector<std::vector<double>>{
                detail::to_vec(loss_gradient(LogDepthPair<double>(st->pred, st->truth, st->mask)))};
          }};
}

struct Suite {
  std::string op;
  Instance (*make)(Rng&);
  double tolerance;
};

inline const std::vector<Suite>& suites() {
  static const std::vector<Suite> all = {
      {"conv2d_dilated", conv_instance, kTolerance}, {"relu", relu_instance, kTolerance},
      {"maxpool2d", maxpool_instance, kTolerance},   {"upsample_nearest", upsample_instance, kTolerance},
      {"concat_channels", concat_instance, kTolerance}, {"dense", dense_instance, kTolerance},
      {"loss_gradient", loss_instance, kLossTolerance}};
  return all;
}

inline OpResult run_suite(const Suite& suite, std::uint64_t seed, std::size_t instances = 20) {
  std::uint64_t salt = 1469598103934665603ULL;
  for (unsigned char ch : suite.op) salt = (salt ^ ch) * 1099511628211ULL;
  Rng rng(Rng::mix(seed, salt));
  OpResult r{suite.op, instances, 0, 0.0, suite.tolerance};
  for (std::size_t i = 0; i < instances; ++i) {
    const Instance inst = suite.make(rng);
    for (const auto& x : inst.inputs) r.coordinates += x.size();
    r.max_rel_error = std::max(r.max_rel_error, check_instance(inst));
  }
  return r;
}

inline std::vector<OpResult> run_all(std::uint64_t seed, std::size_t instances = 20) {
  std::vector<OpResult> out;
  for (const auto& s : suites()) out.push_back(run_suite(s, seed, instances));
  return out;
}

}  // namespace ddcn::gradcheck
