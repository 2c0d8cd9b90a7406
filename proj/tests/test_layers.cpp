#include <gtest/gtest.h>

#include <cmath>

#include "ddcn/gradcheck.hpp"
#include "ddcn/layers.hpp"

using namespace ddcn;

TEST(Relu, ZeroInputHasZeroGradient) {
  const Tensor4<double> x(Shape4{1, 1, 1, 4}, {-1.0, 0.0, 2.0, -0.5});
  const auto r = relu(x);
  EXPECT_EQ(r.output, (Tensor4<double>(Shape4{1, 1, 1, 4}, {0.0, 0.0, 2.0, 0.0})));
  const auto g = r.backward(tensor_fill(Shape4{1, 1, 1, 4}, 5.0));
  EXPECT_EQ(g, (Tensor4<double>(Shape4{1, 1, 1, 4}, {0.0, 0.0, 5.0, 0.0})));
  EXPECT_THROW(r.backward(tensor_fill(Shape4{1, 1, 2, 2}, 1.0)), ShapeError);
}

TEST(MaxPool, TieRoutesToFirstMaximum) {
  const auto x = tensor_fill(Shape4{1, 1, 2, 2}, 3.0);
  const auto r = maxpool2d(x, Window2{2, 2}, Window2{2, 2});
  EXPECT_EQ(r.output(0, 0, 0, 0), 3.0);
  const auto g = r.backward(tensor_fill(Shape4{1, 1, 1, 1}, 1.0));
  EXPECT_EQ(g, (Tensor4<double>(Shape4{1, 1, 2, 2}, {1.0, 0.0, 0.0, 0.0})));
}

TEST(MaxPool, OddExtentFloors) {
  Rng rng(1);
  const auto x = gradcheck::detail::random_tensor(Shape4{2, 3, 15, 9}, rng);
  const auto r = maxpool2d(x, Window2{2, 2}, Window2{2, 2});
  EXPECT_EQ(r.output.shape(), (Shape4{2, 3, 7, 4}));
  // last row and column of the input never contribute
  double m = -1e9;
  for (std::size_t y = 0; y < 2; ++y)
    for (std::size_t xx = 0; xx < 2; ++xx) m = std::max(m, x(1, 2, 12 + y, 6 + xx));
  EXPECT_EQ(r.output(1, 2, 6, 3), m);
}

TEST(MaxPool, SamePaddedStrideOneKeepsSize) {
  Rng rng(2);
  const auto x = gradcheck::detail::random_tensor(Shape4{1, 2, 80, 60}, rng, -5.0, -1.0);
  const auto r = maxpool2d(x, Window2{3, 3}, Window2{1, 1}, Padding{1, 1});
  EXPECT_EQ(r.output.shape(), x.shape());
  // padding never wins, even for all-negative inputs
  double m = -1e9;
  for (std::size_t y = 0; y < 2; ++y)
    for (std::size_t xx = 0; xx < 2; ++xx) m = std::max(m, x(0, 1, y, xx));
  EXPECT_EQ(r.output(0, 1, 0, 0), m);
}

TEST(MaxPool, Errors) {
  const auto x = tensor_fill(Shape4{1, 1, 3, 3}, 0.0);
  EXPECT_THROW(maxpool2d(x, Window2{0, 2}, Window2{1, 1}), ConfigError);
  EXPECT_THROW(maxpool2d(x, Window2{2, 2}, Window2{1, 1}, Padding{2, 0}), ConfigError);
  EXPECT_THROW(maxpool2d(x, Window2{4, 4}, Window2{1, 1}), GeometryError);
}

TEST(Upsample, ReplicatesAndSumsBack) {
  const Tensor4<double> x(Shape4{1, 1, 1, 2}, {1.0, 2.0});
  const auto r = upsample_nearest(x, Window2{2, 2});
  EXPECT_EQ(r.output, (Tensor4<double>(Shape4{1, 1, 2, 4}, {1, 1, 2, 2, 1, 1, 2, 2})));
  const auto g = r.backward(tensor_fill(Shape4{1, 1, 2, 4}, 1.0));
  EXPECT_EQ(g, (Tensor4<double>(Shape4{1, 1, 1, 2}, {4.0, 4.0})));
  EXPECT_THROW(upsample_nearest(x, Window2{0, 1}), ConfigError);
}

TEST(Concat, ChannelOrderAndSplit) {
  const auto a = tensor_fill(Shape4{2, 2, 3, 3}, 1.0);
  const auto b = tensor_fill(Shape4{2, 1, 3, 3}, 2.0);
  const auto r = concat_channels(a, b);
  EXPECT_EQ(r.output.shape(), (Shape4{2, 3, 3, 3}));
  EXPECT_EQ(r.output(1, 1, 2, 2), 1.0);
  EXPECT_EQ(r.output(1, 2, 0, 0), 2.0);
  Tensor4<double> up(r.output.shape());
  for (std::size_t i = 0; i < up.size(); ++i) up[i] = static_cast<double>(i);
  const auto [da, db] = r.backward(up);
  EXPECT_EQ(da(1, 0, 0, 0), up(1, 0, 0, 0));
  EXPECT_EQ(db(1, 0, 2, 1), up(1, 2, 2, 1));
  EXPECT_THROW(concat_channels(a, tensor_fill(Shape4{2, 1, 3, 4}, 0.0)), ShapeError);
}

TEST(Dense, MatchesHandSum) {
  DenseParams<double> p;
  p.weights = Tensor4<double>(Shape4{2, 1, 1, 3}, {1, 2, 3, -1, 0, 1});
  p.bias = {0.5, -0.5};
  const Tensor4<double> x(Shape4{1, 1, 1, 3}, {1, 1, 2});
  const auto y = dense_forward(x, p);
  EXPECT_EQ(y.shape(), (Shape4{1, 2, 1, 1}));
  EXPECT_EQ(y[0], 9.5);
  EXPECT_EQ(y[1], 0.5);
  EXPECT_EQ(p.parameter_count(), 8u);
  EXPECT_THROW(dense_forward(tensor_fill(Shape4{1, 1, 1, 4}, 0.0), p), ShapeError);
}

TEST(GradCheck, EveryOpPasses) {
  for (const auto& r : gradcheck::run_all(11, 20)) {
    EXPECT_TRUE(r.pass()) << r.op << " max rel error " << r.max_rel_error;
    EXPECT_GE(r.instances, 20u);
  }
}

TEST(Relu, NanPropagates) {
  const Tensor4<double> x(Shape4{1, 1, 1, 1}, {std::nan("")});
  EXPECT_TRUE(std::isnan(relu(x).output[0]));
}
