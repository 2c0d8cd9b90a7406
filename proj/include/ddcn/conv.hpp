#pragma once

#include <atomic>
#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "ddcn/errors.hpp"
#include "ddcn/parallel.hpp"
#include "ddcn/tensor.hpp"

namespace ddcn {

namespace hooks {
// Negative-control switch for gradcheck: perturbs the convolution input
// gradient so the finite-difference suite must report a failure.
inline std::atomic<bool> sabotage_conv_backward{false};
}  // namespace hooks

// Forward value plus a closure mapping the upstream gradient to the gradients
// of the forward inputs. The closure only captures immutable saved values.
template <Real T, typename Grads>
struct GradPair {
  Tensor4<T> output;
  std::function<Grads(const Tensor4<T>&)> backward;
};

struct Padding {
  std::size_t h = 0;
  std::size_t w = 0;
  friend bool operator==(const Padding&, const Padding&) = default;
};

template <Real T>
struct ConvParams {
  Tensor4<T> weights;  // (out, in, k_h, k_w)
  std::vector<T> bias;  // out
  std::size_t dilation = 1;
  std::size_t stride = 1;
  Padding padding{};

  std::size_t out_channels() const { return weights.shape().n; }
  std::size_t in_channels() const { return weights.shape().c; }
  std::size_t kernel_h() const { return weights.shape().h; }
  std::size_t kernel_w() const { return weights.shape().w; }

  // Independent of the dilation factor.
  std::size_t parameter_count() const { return weights.size() + bias.size(); }
};

// Zero padding that keeps a stride-1 convolution size-preserving.
inline Padding same_padding(std::size_t kernel_h, std::size_t kernel_w, std::size_t dilation) {
  return {dilation * (kernel_h - 1) / 2, dilation * (kernel_w - 1) / 2};
}

template <Real T>
struct ConvGrads {
  Tensor4<T> d_input;
  Tensor4<T> d_weights;
  std::vector<T> d_bias;
};

// Output extent along one axis; 0 when the dilated kernel does not fit.
inline std::size_t conv_out_extent(std::size_t in, std::size_t pad, std::size_t k,
                                   std::size_t dilation, std::size_t stride) {
  const std::size_t span = dilation * (k - 1) + 1;
  if (in + 2 * pad < span) return 0;
  return (in + 2 * pad - span) / stride + 1;
}

namespace detail {

template <Real T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

struct ConvGeometry {
  std::size_t channels, height, width;
  std::size_t kh, kw, dilation, stride, pad_h, pad_w;
  std::size_t out_h, out_w;

  std::size_t rows() const { return channels * kh * kw; }
  std::size_t cols() const { return out_h * out_w; }
};

// Patch gather: row (c, i, j) holds input(c, oy*s + l*i - pad_h, ox*s + l*j - pad_w)
// for the output rows [oy_begin, oy_end), zero outside the image.
template <Real T>
void im2col(const T* image, const ConvGeometry& g, T* cols, std::size_t oy_begin, std::size_t oy_end) {
  const std::size_t ncols = (oy_end - oy_begin) * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c) {
    const T* plane = image + c * g.height * g.width;
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        T* row = cols + ((c * g.kh + i) * g.kw + j) * ncols;
        const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(g.dilation * i) -
                                  static_cast<std::ptrdiff_t>(g.pad_h);
        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(g.dilation * j) -
                                  static_cast<std::ptrdiff_t>(g.pad_w);
        for (std::size_t oy = oy_begin; oy < oy_end; ++oy) {
          T* out = row + (oy - oy_begin) * g.out_w;
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride) + dy;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) {
            std::fill(out, out + g.out_w, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(iy) * g.width;
          if (g.stride == 1) {
            // Valid ox range: 0 <= ox + dx < width.
            // Padding wider than the image can push lo past the row end.
            const auto out_w = static_cast<std::ptrdiff_t>(g.out_w);
            std::ptrdiff_t lo = std::min(out_w, std::max<std::ptrdiff_t>(0, -dx));
            std::ptrdiff_t hi = std::min(out_w, static_cast<std::ptrdiff_t>(g.width) - dx);
            if (hi < lo) hi = lo;
            std::fill(out, out + lo, T(0));
            std::copy(src + lo + dx, src + hi + dx, out + lo);
            std::fill(out + hi, out + g.out_w, T(0));
          } else {
            for (std::size_t ox = 0; ox < g.out_w; ++ox) {
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride) + dx;
              out[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width))
                            ? T(0)
                            : src[static_cast<std::size_t>(ix)];
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col: scatter-add patch rows back onto the image.
template <Real T>
void col2im(const T* cols, const ConvGeometry& g, T* image, std::size_t oy_begin, std::size_t oy_end) {
  const std::size_t ncols = (oy_end - oy_begin) * g.out_w;
  for (std::size_t c = 0; c < g.channels; ++c) {
    T* plane = image + c * g.height * g.width;
    for (std::size_t i = 0; i < g.kh; ++i) {
      for (std::size_t j = 0; j < g.kw; ++j) {
        const T* row = cols + ((c * g.kh + i) * g.kw + j) * ncols;
        const std::ptrdiff_t dy = static_cast<std::ptrdiff_t>(g.dilation * i) -
                                  static_cast<std::ptrdiff_t>(g.pad_h);
        const std::ptrdiff_t dx = static_cast<std::ptrdiff_t>(g.dilation * j) -
                                  static_cast<std::ptrdiff_t>(g.pad_w);
        for (std::size_t oy = oy_begin; oy < oy_end; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride) + dy;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.height)) continue;
          const T* in = row + (oy - oy_begin) * g.out_w;
          T* dst = plane + static_cast<std::size_t>(iy) * g.width;
          if (g.stride == 1) {
            std::ptrdiff_t lo = std::max<std::ptrdiff_t>(0, -dx);
            std::ptrdiff_t hi = std::min<std::ptrdiff_t>(static_cast<std::ptrdiff_t>(g.out_w),
                                                         static_cast<std::ptrdiff_t>(g.width) - dx);
            for (std::ptrdiff_t ox = lo; ox < hi; ++ox) dst[ox + dx] += in[ox];
            continue;
          }
          for (std::size_t ox = 0; ox < g.out_w; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride) + dx;
            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.width)) continue;
            dst[static_cast<std::size_t>(ix)] += in[ox];
          }
        }
      }
    }
  }
}

// Output rows per GEMM block, sized so a patch block stays cache resident
// (about 512 output pixels).
inline std::size_t rows_per_block(const ConvGeometry& g) {
  return std::clamp<std::size_t>(512 / std::max<std::size_t>(1, g.out_w), 1, g.out_h);
}

template <Real T>
ConvGeometry conv_geometry(const Shape4& in, const ConvParams<T>& p) {
  if (p.dilation == 0 || p.stride == 0) throw ConfigError("dilation and stride must be >= 1");
  if (in.c != p.in_channels())
    throw ShapeError("convolution expects " + std::to_string(p.in_channels()) +
                     " input channels, got " + std::to_string(in.c));
  if (p.kernel_h() % 2 == 0 || p.kernel_w() % 2 == 0)
    throw ConfigError("convolution kernels must have odd extents, got " +
                      std::to_string(p.kernel_h()) + "x" + std::to_string(p.kernel_w()));
  if (p.bias.size() != p.out_channels())
    throw ShapeError("bias length " + std::to_string(p.bias.size()) + " does not match " +
                     std::to_string(p.out_channels()) + " output channels");
  ConvGeometry g{in.c,
                 in.h,
                 in.w,
                 p.kernel_h(),
                 p.kernel_w(),
                 p.dilation,
                 p.stride,
                 p.padding.h,
                 p.padding.w,
                 0,
                 0};
  g.out_h = conv_out_extent(in.h, g.pad_h, g.kh, g.dilation, g.stride);
  g.out_w = conv_out_extent(in.w, g.pad_w, g.kw, g.dilation, g.stride);
  if (g.out_h < 1 || g.out_w < 1)
    throw GeometryError("dilated kernel " + std::to_string(g.kh) + "x" + std::to_string(g.kw) +
                        " (l=" + std::to_string(g.dilation) + ") does not fit input " +
                        std::to_string(in.h) + "x" + std::to_string(in.w));
  return g;
}

}  // namespace detail

// output(n, o, y, x) = bias(o) + sum_{c,i,j} input(n, c, y*s + l*i - pad_h, x*s + l*j - pad_w)
//                                          * weights(o, c, i, j)
// with zero padding. Evaluated as a patch gather followed by one GEMM per sample.
template <Real T>
Tensor4<T> conv2d_forward(const Tensor4<T>& input, const ConvParams<T>& p) {
  using Matrix = detail::RowMatrix<T>;
  const auto g = detail::conv_geometry(input.shape(), p);
  const std::size_t batch = input.shape().n;
  const std::size_t out_c = p.out_channels();
  Tensor4<T> output(Shape4{batch, out_c, g.out_h, g.out_w});

  const Eigen::Map<const Matrix> weights(p.weights.ptr(), static_cast<Eigen::Index>(out_c),
                                         static_cast<Eigen::Index>(g.rows()));
  const std::size_t block = detail::rows_per_block(g);
  parallel_for(batch, [&](std::size_t n) {
    std::vector<T> cols(g.rows() * block * g.out_w);
    Eigen::Map<Matrix> out(output.plane(n, 0), static_cast<Eigen::Index>(out_c),
                           static_cast<Eigen::Index>(g.cols()));
    for (std::size_t y0 = 0; y0 < g.out_h; y0 += block) {
      const std::size_t y1 = std::min(g.out_h, y0 + block);
      const auto width = static_cast<Eigen::Index>((y1 - y0) * g.out_w);
      detail::im2col(input.plane(n, 0), g, cols.data(), y0, y1);
      const Eigen::Map<const Matrix> patches(cols.data(), static_cast<Eigen::Index>(g.rows()), width);
      out.middleCols(static_cast<Eigen::Index>(y0 * g.out_w), width).noalias() = weights * patches;
    }
    for (std::size_t o = 0; o < out_c; ++o) out.row(static_cast<Eigen::Index>(o)).array() += p.bias[o];
  });
  return output;
}

// Adjoint of conv2d_forward. Per-sample weight gradients are summed in sample
// order, so the result does not depend on the worker count.
template <Real T>
ConvGrads<T> conv2d_backward(const Tensor4<T>& upstream, const Tensor4<T>& input,
                             const ConvParams<T>& p) {
  using Matrix = detail::RowMatrix<T>;
  const auto g = detail::conv_geometry(input.shape(), p);
  const std::size_t batch = input.shape().n;
  const std::size_t out_c = p.out_channels();
  const Shape4 expected{batch, out_c, g.out_h, g.out_w};
  if (upstream.shape() != expected)
    throw ShapeError("convolution upstream gradient " + upstream.shape().str() +
                     " does not match forward output " + expected.str());

  ConvGrads<T> grads{Tensor4<T>(input.shape()), Tensor4<T>(p.weights.shape()),
                     std::vector<T>(out_c, T(0))};
  const Eigen::Map<const Matrix> weights(p.weights.ptr(), static_cast<Eigen::Index>(out_c),
                                         static_cast<Eigen::Index>(g.rows()));
  Eigen::Map<Matrix> d_weights(grads.d_weights.ptr(), static_cast<Eigen::Index>(out_c),
                               static_cast<Eigen::Index>(g.rows()));

  const std::size_t block = detail::rows_per_block(g);
  const std::size_t wave = std::max<std::size_t>(1, static_cast<std::size_t>(thread_cap().load()));
  std::vector<Matrix> partial(std::min(wave, batch));
  std::vector<double> bias_acc(out_c, 0.0);

  for (std::size_t start = 0; start < batch; start += wave) {
    const std::size_t stop = std::min(batch, start + wave);
    parallel_for(stop - start, [&](std::size_t k) {
      const std::size_t n = start + k;
      std::vector<T> cols(g.rows() * block * g.out_w);
      const Eigen::Map<const Matrix> dy(upstream.plane(n, 0), static_cast<Eigen::Index>(out_c),
                                        static_cast<Eigen::Index>(g.cols()));
      partial[k].setZero(static_cast<Eigen::Index>(out_c), static_cast<Eigen::Index>(g.rows()));
      for (std::size_t y0 = 0; y0 < g.out_h; y0 += block) {
        const std::size_t y1 = std::min(g.out_h, y0 + block);
        const auto width = static_cast<Eigen::Index>((y1 - y0) * g.out_w);
        const auto dy_block = dy.middleCols(static_cast<Eigen::Index>(y0 * g.out_w), width);
        detail::im2col(input.plane(n, 0), g, cols.data(), y0, y1);
        Eigen::Map<Matrix> patches(cols.data(), static_cast<Eigen::Index>(g.rows()), width);
        partial[k].noalias() += dy_block * patches.transpose();
        patches.noalias() = weights.transpose() * dy_block;
        detail::col2im(cols.data(), g, grads.d_input.plane(n, 0), y0, y1);
      }
    });
    for (std::size_t k = 0; k < stop - start; ++k) {
      d_weights += partial[k];
      const std::size_t n = start + k;
      for (std::size_t o = 0; o < out_c; ++o) {
        const T* row = upstream.plane(n, o);
        double s = 0.0;
        for (std::size_t q = 0; q < g.cols(); ++q) s += static_cast<double>(row[q]);
        bias_acc[o] += s;
      }
    }
  }
  for (std::size_t o = 0; o < out_c; ++o) grads.d_bias[o] = static_cast<T>(bias_acc[o]);

  if (hooks::sabotage_conv_backward.load()) {
    for (auto& v : grads.d_input.data()) v *= T(1.01);
  }
  return grads;
}

template <Real T>
GradPair<T, ConvGrads<T>> conv2d_dilated(const Tensor4<T>& input, const ConvParams<T>& p) {
  Tensor4<T> out = conv2d_forward(input, p);
  return {std::move(out), [input, p](const Tensor4<T>& upstream) {
            return conv2d_backward(upstream, input, p);
          }};
}

}  // namespace ddcn
