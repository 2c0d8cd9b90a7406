#pragma once

#include <cstddef>
#include <limits>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "ddcn/conv.hpp"
#include "ddcn/errors.hpp"
#include "ddcn/tensor.hpp"

namespace ddcn {

// max(0, x); the derivative at exactly 0 is taken as 0. NaN passes through
// so a diverging run is caught at the loss.
template <Real T>
GradPair<T, Tensor4<T>> relu(const Tensor4<T>& input) {
  Tensor4<T> out(input.shape());
  auto src = input.data();
  auto dst = out.data();
  for (std::size_t i = 0; i < src.size(); ++i) dst[i] = src[i] < T(0) ? T(0) : src[i];
  return {std::move(out), [input](const Tensor4<T>& upstream) {
            if (upstream.shape() != input.shape())
              throw ShapeError("relu upstream " + upstream.shape().str() + " vs input " +
                               input.shape().str());
            Tensor4<T> grad(input.shape());
            auto x = input.data();
            auto g = upstream.data();
            auto d = grad.data();
            for (std::size_t i = 0; i < x.size(); ++i) d[i] = x[i] > T(0) ? g[i] : T(0);
            return grad;
          }};
}

struct Window2 {
  std::size_t h = 1;
  std::size_t w = 1;
  friend bool operator==(const Window2&, const Window2&) = default;
};

// Max pooling; padded cells never win. The backward pass routes each
// upstream value to the first maximum in row-major window order.
template <Real T>
GradPair<T, Tensor4<T>> maxpool2d(const Tensor4<T>& input, Window2 window, Window2 stride,
                                  Padding padding = {}) {
  const Shape4 in = input.shape();
  if (window.h == 0 || window.w == 0 || stride.h == 0 || stride.w == 0)
    throw ConfigError("pooling window and stride must be >= 1");
  if (padding.h >= window.h || padding.w >= window.w)
    throw ConfigError("pooling padding must be smaller than the window");
  if (window.h > in.h + 2 * padding.h || window.w > in.w + 2 * padding.w)
    throw GeometryError("pooling window " + std::to_string(window.h) + "x" +
                        std::to_string(window.w) + " larger than padded input " +
                        std::to_string(in.h + 2 * padding.h) + "x" +
                        std::to_string(in.w + 2 * padding.w));
  const std::size_t out_h = (in.h + 2 * padding.h - window.h) / stride.h + 1;
  const std::size_t out_w = (in.w + 2 * padding.w - window.w) / stride.w + 1;
  const Shape4 out_shape{in.n, in.c, out_h, out_w};
  Tensor4<T> out(out_shape);
  std::vector<std::size_t> argmax(out.size());

  for (std::size_t n = 0; n < in.n; ++n) {
    for (std::size_t c = 0; c < in.c; ++c) {
      const T* src = input.plane(n, c);
      for (std::size_t oy = 0; oy < out_h; ++oy) {
        for (std::size_t ox = 0; ox < out_w; ++ox) {
          T best = -std::numeric_limits<T>::infinity();
          std::size_t best_idx = std::numeric_limits<std::size_t>::max();
          for (std::size_t i = 0; i < window.h; ++i) {
            const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * stride.h + i) -
                                     static_cast<std::ptrdiff_t>(padding.h);
            if (y < 0 || y >= static_cast<std::ptrdiff_t>(in.h)) continue;
            for (std::size_t j = 0; j < window.w; ++j) {
              const std::ptrdiff_t x = static_cast<std::ptrdiff_t>(ox * stride.w + j) -
                                       static_cast<std::ptrdiff_t>(padding.w);
              if (x < 0 || x >= static_cast<std::ptrdiff_t>(in.w)) continue;
              const std::size_t idx = static_cast<std::size_t>(y) * in.w + static_cast<std::size_t>(x);
              if (best_idx == std::numeric_limits<std::size_t>::max() || src[idx] > best) {
                best = src[idx];
                best_idx = idx;
              }
            }
          }
          const std::size_t o = out.offset(n, c, oy, ox);
          out[o] = best;
          argmax[o] = input.offset(n, c, 0, 0) + best_idx;
        }
      }
    }
  }
  return {std::move(out), [in, out_shape, argmax = std::move(argmax)](const Tensor4<T>& upstream) {
            if (upstream.shape() != out_shape)
              throw ShapeError("maxpool upstream " + upstream.shape().str() + " vs output " +
                               out_shape.str());
            Tensor4<T> grad(in);
            auto g = upstream.data();
            for (std::size_t o = 0; o < g.size(); ++o) grad[argmax[o]] += g[o];
            return grad;
          }};
}

template <Real T>
GradPair<T, Tensor4<T>> upsample_nearest(const Tensor4<T>& input, Window2 factor) {
  if (factor.h == 0 || factor.w == 0) throw ConfigError("upsampling factor must be >= 1");
  const Shape4 in = input.shape();
  const Shape4 out_shape{in.n, in.c, in.h * factor.h, in.w * factor.w};
  Tensor4<T> out(out_shape);
  for (std::size_t n = 0; n < in.n; ++n)
    for (std::size_t c = 0; c < in.c; ++c)
      for (std::size_t y = 0; y < out_shape.h; ++y)
        for (std::size_t x = 0; x < out_shape.w; ++x)
          out(n, c, y, x) = input(n, c, y / factor.h, x / factor.w);
  return {std::move(out), [in, out_shape, factor](const Tensor4<T>& upstream) {
            if (upstream.shape() != out_shape)
              throw ShapeError("upsample upstream " + upstream.shape().str() + " vs output " +
                               out_shape.str());
            Tensor4<T> grad(in);
            for (std::size_t n = 0; n < in.n; ++n)
              for (std::size_t c = 0; c < in.c; ++c)
                for (std::size_t y = 0; y < out_shape.h; ++y)
                  for (std::size_t x = 0; x < out_shape.w; ++x)
                    grad(n, c, y / factor.h, x / factor.w) += upstream(n, c, y, x);
            return grad;
          }};
}

// Channel concatenation, a's channels first.
template <Real T>
GradPair<T, std::pair<Tensor4<T>, Tensor4<T>>> concat_channels(const Tensor4<T>& a,
                                                               const Tensor4<T>& b) {
  const Shape4 sa = a.shape();
  const Shape4 sb = b.shape();
  if (sa.n != sb.n || sa.h != sb.h || sa.w != sb.w)
    throw ShapeError("concat needs equal batch and spatial sizes, got " + sa.str() + " and " +
                     sb.str());
  const Shape4 out_shape{sa.n, sa.c + sb.c, sa.h, sa.w};
  Tensor4<T> out(out_shape);
  const std::size_t plane = sa.h * sa.w;
  for (std::size_t n = 0; n < sa.n; ++n) {
    std::copy(a.plane(n, 0), a.plane(n, 0) + sa.c * plane, out.plane(n, 0));
    std::copy(b.plane(n, 0), b.plane(n, 0) + sb.c * plane, out.plane(n, sa.c));
  }
  return {std::move(out), [sa, sb, out_shape](const Tensor4<T>& upstream) {
            if (upstream.shape() != out_shape)
              throw ShapeError("concat upstream " + upstream.shape().str() + " vs output " +
                               out_shape.str());
            Tensor4<T> da(sa), db(sb);
            const std::size_t plane = sa.h * sa.w;
            for (std::size_t n = 0; n < sa.n; ++n) {
              const T* src = upstream.plane(n, 0);
              std::copy(src, src + sa.c * plane, da.plane(n, 0));
              std::copy(src + sa.c * plane, src + (sa.c + sb.c) * plane, db.plane(n, 0));
            }
            return std::make_pair(std::move(da), std::move(db));
          }};
}

// Fully connected layer over the flattened (c, h, w) features of each sample;
// weights are shaped (out, c, h, w), i.e. a convolution whose kernel covers
// the whole input. Produces (n, out, 1, 1).
template <Real T>
struct DenseParams {
  Tensor4<T> weights;
  std::vector<T> bias;

  std::size_t out_features() const { return weights.shape().n; }
  std::size_t in_features() const { return weights.size() / weights.shape().n; }
  std::size_t parameter_count() const { return weights.size() + bias.size(); }
};

template <Real T>
struct DenseGrads {
  Tensor4<T> d_input;
  Tensor4<T> d_weights;
  std::vector<T> d_bias;
};

template <Real T>
Tensor4<T> dense_forward(const Tensor4<T>& input, const DenseParams<T>& p) {
  using Matrix = detail::RowMatrix<T>;
  const Shape4 in = input.shape();
  const Shape4 ws = p.weights.shape();
  if (in.c != ws.c || in.h != ws.h || in.w != ws.w)
    throw ShapeError("fully connected layer expects features " + Shape4{1, ws.c, ws.h, ws.w}.str() +
                     ", got " + in.str());
  if (p.bias.size() != ws.n) throw ShapeError("fully connected bias length mismatch");
  const auto batch = static_cast<Eigen::Index>(in.n);
  const auto features = static_cast<Eigen::Index>(p.in_features());
  const auto outs = static_cast<Eigen::Index>(ws.n);
  Tensor4<T> out(Shape4{in.n, ws.n, 1, 1});
  const Eigen::Map<const Matrix> x(input.ptr(), batch, features);
  const Eigen::Map<const Matrix> w(p.weights.ptr(), outs, features);
  Eigen::Map<Matrix> y(out.ptr(), batch, outs);
  y.noalias() = x * w.transpose();
  for (Eigen::Index n = 0; n < batch; ++n)
    for (Eigen::Index o = 0; o < outs; ++o) y(n, o) += p.bias[static_cast<std::size_t>(o)];
  return out;
}

template <Real T>
DenseGrads<T> dense_backward(const Tensor4<T>& upstream, const Tensor4<T>& input,
                             const DenseParams<T>& p) {
  using Matrix = detail::RowMatrix<T>;
  const Shape4 in = input.shape();
  const Shape4 ws = p.weights.shape();
  if (upstream.shape() != Shape4{in.n, ws.n, 1, 1})
    throw ShapeError("fully connected upstream " + upstream.shape().str() + " mismatch");
  const auto batch = static_cast<Eigen::Index>(in.n);
  const auto features = static_cast<Eigen::Index>(p.in_features());
  const auto outs = static_cast<Eigen::Index>(ws.n);
  DenseGrads<T> grads{Tensor4<T>(in), Tensor4<T>(ws), std::vector<T>(ws.n, T(0))};
  const Eigen::Map<const Matrix> x(input.ptr(), batch, features);
  const Eigen::Map<const Matrix> w(p.weights.ptr(), outs, features);
  const Eigen::Map<const Matrix> dy(upstream.ptr(), batch, outs);
  Eigen::Map<Matrix>(grads.d_weights.ptr(), outs, features).noalias() = dy.transpose() * x;
  Eigen::Map<Matrix>(grads.d_input.ptr(), batch, features).noalias() = dy * w;
  for (Eigen::Index o = 0; o < outs; ++o) {
    double s = 0.0;
    for (Eigen::Index n = 0; n < batch; ++n) s += static_cast<double>(dy(n, o));
    grads.d_bias[static_cast<std::size_t>(o)] = static_cast<T>(s);
  }
  return grads;
}

template <Real T>
GradPair<T, DenseGrads<T>> dense(const Tensor4<T>& input, const DenseParams<T>& p) {
  Tensor4<T> out = dense_forward(input, p);
  return {std::move(out), [input, p](const Tensor4<T>& upstream) {
            return dense_backward(upstream, input, p);
          }};
}

template <Real T>
GradPair<T, Tensor4<T>> reshape(const Tensor4<T>& input, Shape4 to) {
  const Shape4 from = input.shape();
  return {input.reshape(to), [from](const Tensor4<T>& upstream) { return upstream.reshape(from); }};
}

}  // namespace ddcn
