#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <set>

#include "ddcn/tensor.hpp"

using namespace ddcn;

TEST(Shape, NumelAndZeroDimension) {
  EXPECT_EQ((Shape4{2, 3, 4, 5}.numel()), 120u);
  EXPECT_THROW((Shape4{1, 0, 4, 4}.numel()), ShapeError);
  const std::size_t big = std::numeric_limits<std::size_t>::max() / 2;
  EXPECT_THROW((Shape4{big, big, 1, 1}.numel()), ShapeError);
}

TEST(Tensor, ConstructionChecksLength) {
  Tensor4<float> t(Shape4{1, 2, 2, 2});
  EXPECT_EQ(t.size(), 8u);
  for (float v : t.data()) EXPECT_EQ(v, 0.0f);
  EXPECT_THROW(Tensor4<float>(Shape4{1, 1, 2, 2}, std::vector<float>(3)), ShapeError);
  EXPECT_EQ(Tensor4<double>::precision(), Precision::F64);
  EXPECT_EQ(Tensor4<float>::precision(), Precision::F32);
}

TEST(Tensor, RowMajorLayout) {
  std::vector<double> v(2 * 3 * 4 * 5);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<double>(i);
  const Tensor4<double> t(Shape4{2, 3, 4, 5}, v);
  EXPECT_EQ(t(1, 2, 3, 4), 119.0);
  EXPECT_EQ(t(0, 1, 0, 0), 20.0);
  EXPECT_EQ(t(1, 0, 2, 1), 60.0 + 10.0 + 1.0);
  EXPECT_EQ(t.plane(1, 1) - t.ptr(), 80);
}

TEST(Tensor, ReshapeKeepsDataAndChecksCount) {
  const Tensor4<float> t(Shape4{1, 2, 3, 4}, std::vector<float>(24, 1.5f));
  const auto r = t.reshape(Shape4{1, 24, 1, 1});
  EXPECT_EQ(r.shape(), (Shape4{1, 24, 1, 1}));
  EXPECT_EQ(r.data()[23], 1.5f);
  EXPECT_EQ(t.shape(), (Shape4{1, 2, 3, 4}));
  EXPECT_THROW(t.reshape(Shape4{1, 5, 5, 1}), ShapeError);
}

TEST(Tensor, CastRoundTrip) {
  const Tensor4<double> d(Shape4{1, 1, 1, 3}, {0.5, -2.25, 3.0});
  const auto f = d.cast<float>();
  EXPECT_EQ(f.precision(), Precision::F32);
  EXPECT_EQ(f.cast<double>(), d);
}

TEST(Tensor, Map2AndReduce) {
  const auto a = tensor_fill(Shape4{1, 1, 2, 2}, 2.0);
  const Tensor4<double> b(Shape4{1, 1, 2, 2}, {1.0, 2.0, 3.0, 4.0});
  const auto c = tensor_map2(a, b, [](double x, double y) { return x * y; });
  EXPECT_EQ(tensor_reduce(c, ReduceOp::Sum), 20.0);
  EXPECT_EQ(tensor_reduce(c, ReduceOp::Max), 8.0);
  EXPECT_EQ(tensor_reduce(c, ReduceOp::Mean), 5.0);
  const auto wrong = tensor_fill(Shape4{1, 1, 1, 4}, 0.0);
  EXPECT_THROW(tensor_map2(a, wrong, [](double x, double y) { return x + y; }), ShapeError);
}

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 100; ++i) {
    const auto x = a.next_u64();
    EXPECT_EQ(x, b.next_u64());
    differs = differs || x != c.next_u64();
  }
  EXPECT_TRUE(differs);
}

TEST(Rng, FirstOutputMatchesMt19937_64) {
  // Reference value of the standard engine: the 10000th output for the
  // default seed 5489 is fixed by the C++ standard.
  Rng r(5489);
  std::uint64_t x = 0;
  for (int i = 0; i < 10000; ++i) x = r.next_u64();
  EXPECT_EQ(x, 9981545732273789042ULL);
}

TEST(Rng, UniformAndBelowStayInRange) {
  Rng r(7);
  std::set<std::uint64_t> seen;
  for (int i = 0; i < 2000; ++i) {
    const double u = r.uniform01();
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
    const double v = r.uniform(-3.0, -1.0);
    EXPECT_GE(v, -3.0);
    EXPECT_LT(v, -1.0);
    const auto k = r.below(6);
    EXPECT_LT(k, 6u);
    seen.insert(k);
  }
  EXPECT_EQ(seen.size(), 6u);
  EXPECT_NE(Rng::mix(1, 2), Rng::mix(2, 1));
  EXPECT_EQ(Rng::mix(5, 9), Rng::mix(5, 9));
}

TEST(Init, UniformFanInBounds) {
  Rng r(3);
  const auto w = init_uniform_fanin<float>(Shape4{8, 4, 3, 3}, 36, r);
  const double bound = std::sqrt(6.0 / 36.0);
  double lo = 1e9, hi = -1e9;
  for (float v : w.data()) {
    lo = std::min(lo, static_cast<double>(v));
    hi = std::max(hi, static_cast<double>(v));
  }
  EXPECT_GE(lo, -bound);
  EXPECT_LE(hi, bound);
  EXPECT_LT(lo, -0.8 * bound);
  EXPECT_GT(hi, 0.8 * bound);
  EXPECT_THROW(init_uniform_fanin<float>(Shape4{1, 1, 1, 1}, 0, r), ConfigError);
}
