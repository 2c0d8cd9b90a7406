#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include "ddcn/errors.hpp"

namespace ddcn {

enum class Precision : std::uint8_t { F32 = 0, F64 = 1 };

inline const char* to_string(Precision p) { return p == Precision::F32 ? "f32" : "f64"; }

template <typename T>
concept Real = std::is_same_v<T, float> || std::is_same_v<T, double>;

template <Real T>
constexpr Precision precision_of() {
  return std::is_same_v<T, float> ? Precision::F32 : Precision::F64;
}

// (batch, channels, rows, cols)
struct Shape4 {
  std::size_t n = 1;
  std::size_t c = 1;
  std::size_t h = 1;
  std::size_t w = 1;

  friend bool operator==(const Shape4&, const Shape4&) = default;

  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," + std::to_string(h) + "," +
           std::to_string(w) + ")";
  }

  // Element count; throws on zero or overflowing dimensions.
  std::size_t numel() const {
    const std::size_t dims[4] = {n, c, h, w};
    std::size_t total = 1;
    for (std::size_t d : dims) {
      if (d == 0) throw ShapeError("zero dimension in shape " + str());
      if (total > std::numeric_limits<std::size_t>::max() / d)
        throw ShapeError("shape " + str() + " overflows the addressable element count");
      total *= d;
    }
    return total;
  }
};

// Dense rank-4 array in row-major (n, c, h, w) order. The shape is fixed at
// construction; reshape returns a new value.
template <Real T>
class Tensor4 {
 public:
  using value_type = T;

  Tensor4() : shape_{1, 1, 1, 1}, data_(1, T(0)) {}

  explicit Tensor4(Shape4 shape) : shape_(shape), data_(shape.numel(), T(0)) {}

  Tensor4(Shape4 shape, std::vector<T> data) : shape_(shape), data_(std::move(data)) {
    if (data_.size() != shape_.numel())
      throw ShapeError("data length " + std::to_string(data_.size()) + " does not match shape " +
                       shape_.str());
  }

  const Shape4& shape() const { return shape_; }
  std::size_t size() const { return data_.size(); }
  static constexpr Precision precision() { return precision_of<T>(); }

  std::span<const T> data() const { return data_; }
  std::span<T> data() { return data_; }
  const T* ptr() const { return data_.data(); }
  T* ptr() { return data_.data(); }

  std::size_t offset(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return ((n * shape_.c + c) * shape_.h + y) * shape_.w + x;
  }
  T& operator()(std::size_t n, std::size_t c, std::size_t y, std::size_t x) {
    return data_[offset(n, c, y, x)];
  }
  const T& operator()(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return data_[offset(n, c, y, x)];
  }
  T& operator[](std::size_t i) { return data_[i]; }
  const T& operator[](std::size_t i) const { return data_[i]; }

  // Pointer to the (h, w) plane of sample n, channel c.
  const T* plane(std::size_t n, std::size_t c) const { return data_.data() + offset(n, c, 0, 0); }
  T* plane(std::size_t n, std::size_t c) { return data_.data() + offset(n, c, 0, 0); }

  Tensor4 reshape(Shape4 to) const & {
    if (to.numel() != data_.size())
      throw ShapeError("cannot reshape " + shape_.str() + " to " + to.str());
    return Tensor4(to, data_);
  }
  Tensor4 reshape(Shape4 to) && {
    if (to.numel() != data_.size())
      throw ShapeError("cannot reshape " + shape_.str() + " to " + to.str());
    return Tensor4(to, std::move(data_));
  }

  template <Real U>
  Tensor4<U> cast() const {
    std::vector<U> out(data_.begin(), data_.end());
    return Tensor4<U>(shape_, std::move(out));
  }

  friend bool operator==(const Tensor4&, const Tensor4&) = default;

 private:
  Shape4 shape_;
  std::vector<T> data_;
};

template <Real T>
Tensor4<T> tensor_fill(Shape4 shape, T value) {
  return Tensor4<T>(shape, std::vector<T>(shape.numel(), value));
}

template <Real T, typename F>
Tensor4<T> tensor_map2(const Tensor4<T>& a, const Tensor4<T>& b, F&& f) {
  if (a.shape() != b.shape())
    throw ShapeError("elementwise shape mismatch " + a.shape().str() + " vs " + b.shape().str());
  std::vector<T> out(a.size());
  auto da = a.data();
  auto db = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<T>(f(da[i], db[i]));
  return Tensor4<T>(a.shape(), std::move(out));
}

enum class ReduceOp { Sum, Max, Mean };

// Reductions always accumulate in double.
template <Real T>
double tensor_reduce(const Tensor4<T>& a, ReduceOp op) {
  auto d = a.data();
  switch (op) {
    case ReduceOp::Max: {
      double m = -std::numeric_limits<double>::infinity();
      for (T v : d) m = std::max(m, static_cast<double>(v));
      return m;
    }
    case ReduceOp::Sum:
    case ReduceOp::Mean: {
      double s = 0.0;
      for (T v : d) s += static_cast<double>(v);
      return op == ReduceOp::Sum ? s : s / static_cast<double>(d.size());
    }
  }
  return 0.0;
}

// Seeded generator: std::mt19937_64 (a fully specified algorithm, so streams
// are identical across platforms) with hand-rolled conversions, because the
// standard distributions are implementation-defined.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : seed_(seed), engine_(seed) {}

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64() { return engine_(); }

  // Uniform in [0, 1) with 53 random bits.
  double uniform01() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

  // Unbiased integer in [0, bound).
  std::uint64_t below(std::uint64_t bound) {
    if (bound == 0) return 0;
    const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() -
                                std::numeric_limits<std::uint64_t>::max() % bound;
    std::uint64_t r;
    do {
      r = engine_();
    } while (r >= limit);
    return r % bound;
  }

  // Stateless derivation of a child seed, e.g. per (seed, epoch).
  static std::uint64_t mix(std::uint64_t a, std::uint64_t b) {
    std::uint64_t z = a ^ (b + 0x9E3779B97F4A7C15ULL + (a << 6) + (a >> 2));
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
  }

 private:
  std::uint64_t seed_;
  std::mt19937_64 engine_;
};

// Uniform in [-sqrt(6 / fan_in), +sqrt(6 / fan_in)].
template <Real T>
Tensor4<T> init_uniform_fanin(Shape4 shape, std::size_t fan_in, Rng& rng) {
  if (fan_in == 0) throw ConfigError("fan_in must be >= 1");
  const double bound = std::sqrt(6.0 / static_cast<double>(fan_in));
  std::vector<T> out(shape.numel());
  for (auto& v : out) v = static_cast<T>(rng.uniform(-bound, bound));
  return Tensor4<T>(shape, std::move(out));
}

}  // namespace ddcn
