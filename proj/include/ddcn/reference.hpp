#pragma once

#include <cstddef>
#include <vector>

#include "ddcn/conv.hpp"
#include "ddcn/si_loss.hpp"
#include "ddcn/tensor.hpp"

// Slow, obviously-correct implementations used only as test oracles.
namespace ddcn::reference {

// Direct sum: out(n,o,y,x) = b(o) + sum_{c,i,j} in(n,c, y*s + l*i - ph, x*s + l*j - pw) * W(o,c,i,j),
// taps outside the image read zero.
template <Real T>
Tensor4<T> conv2d_direct(const Tensor4<T>& input, const ConvParams<T>& p) {
  const Shape4 in = input.shape();
  const Shape4 ws = p.weights.shape();
  const std::size_t oh = conv_out_extent(in.h, p.padding.h, ws.h, p.dilation, p.stride);
  const std::size_t ow = conv_out_extent(in.w, p.padding.w, ws.w, p.dilation, p.stride);
  Tensor4<T> out(Shape4{in.n, ws.n, oh, ow});
  for (std::size_t n = 0; n < in.n; ++n)
    for (std::size_t o = 0; o < ws.n; ++o)
      for (std::size_t y = 0; y < oh; ++y)
        for (std::size_t x = 0; x < ow; ++x) {
          long double acc = p.bias[o];
          for (std::size_t c = 0; c < in.c; ++c)
            for (std::size_t i = 0; i < ws.h; ++i)
              for (std::size_t j = 0; j < ws.w; ++j) {
                const long long sy = static_cast<long long>(y * p.stride + p.dilation * i) -
                                     static_cast<long long>(p.padding.h);
                const long long sx = static_cast<long long>(x * p.stride + p.dilation * j) -
                                     static_cast<long long>(p.padding.w);
                if (sy < 0 || sx < 0 || sy >= static_cast<long long>(in.h) || sx >= static_cast<long long>(in.w))
                  continue;
                acc += static_cast<long double>(input(n, c, static_cast<std::size_t>(sy), static_cast<std::size_t>(sx))) *
                       p.weights(o, c, i, j);
              }
          out(n, o, y, x) = static_cast<T>(acc);
        }
  return out;
}

// (1/2n^2) sum_{i,j} ((log y_i - log y_j) - (log y*_i - log y*_j))^2 over valid pixels.
template <Real T>
double loss_pairwise_quadratic(const LogDepthPair<T>& pair) {
  const auto d = pair.log_difference();
  const auto& mask = pair.mask();
  long double acc = 0.0L;
  for (std::size_t i = 0; i < d.size(); ++i) {
    if (!mask[i]) continue;
    for (std::size_t j = 0; j < d.size(); ++j) {
      if (!mask[j]) continue;
      const long double e = static_cast<long double>(d[i]) - d[j];
      acc += e * e;
    }
  }
  const long double n = static_cast<long double>(pair.n_valid());
  return static_cast<double>(acc / (2.0L * n * n));
}

}  // namespace ddcn::reference
