#pragma once

#include <cstddef>
#include <span>
#include <utility>

#include "ddcn/errors.hpp"

namespace ddcn {

struct RfLayer {
  std::size_t kernel_h = 1;
  std::size_t kernel_w = 1;
  std::size_t dilation = 1;
  std::size_t stride_h = 1;
  std::size_t stride_w = 1;

  static RfLayer square(std::size_t kernel, std::size_t dilation, std::size_t stride) {
    return {kernel, kernel, dilation, stride, stride};
  }
};

struct ReceptiveField {
  std::size_t h = 1;
  std::size_t w = 1;
  friend bool operator==(const ReceptiveField&, const ReceptiveField&) = default;
};

// rf += (k - 1) * l * jump; jump *= stride; starting from rf = jump = 1.
inline ReceptiveField receptive_field(std::span<const RfLayer> layers) {
  if (layers.empty()) throw ConfigError("receptive field of an empty layer list");
  ReceptiveField rf;
  std::size_t jump_h = 1, jump_w = 1;
  for (const RfLayer& l : layers) {
    if (l.kernel_h == 0 || l.kernel_w == 0 || l.dilation == 0 || l.stride_h == 0 || l.stride_w == 0)
      throw ConfigError("receptive field layer entries must be >= 1");
    rf.h += (l.kernel_h - 1) * l.dilation * jump_h;
    rf.w += (l.kernel_w - 1) * l.dilation * jump_w;
    jump_h *= l.stride_h;
    jump_w *= l.stride_w;
  }
  return rf;
}

}  // namespace ddcn
