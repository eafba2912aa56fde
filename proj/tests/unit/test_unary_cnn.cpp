#include <gtest/gtest.h>

#include "cnncrf/unary_cnn.hpp"
#include "test_util.hpp"

using namespace cnncrf;
using namespace testutil;

namespace {

// Naive same-size convolution with the top-left anchor convention.
Tensor3<double> reference_conv(const Tensor3<double>& in, const ConvLayer<double>& l) {
  const long H = static_cast<long>(in.height()), W = static_cast<long>(in.width());
  Tensor3<double> out(l.out_channels, in.height(), in.width());
  for (std::size_t o = 0; o < l.out_channels; ++o)
    for (long r = 0; r < H; ++r)
      for (long c = 0; c < W; ++c) {
        double s = l.bias[o];
        for (std::size_t i = 0; i < l.in_channels; ++i)
          for (std::size_t u = 0; u < l.kh; ++u)
            for (std::size_t v = 0; v < l.kw; ++v) {
              const long rr = r + static_cast<long>(u) - static_cast<long>((l.kh - 1) / 2);
              const long cc = c + static_cast<long>(v) - static_cast<long>((l.kw - 1) / 2);
              if (rr < 0 || rr >= H || cc < 0 || cc >= W) continue;
              s += l.w(o, i, u, v) * in(i, static_cast<std::size_t>(rr), static_cast<std::size_t>(cc));
            }
        out(o, static_cast<std::size_t>(r), static_cast<std::size_t>(c)) = s;
      }
  return out;
}

double weighted_sum(const Tensor3<double>& a, const Tensor3<double>& b) {
  double s = 0;
  for (std::size_t n = 0; n < a.size(); ++n) s += a.data()[n] * b.data()[n];
  return s;
}

}  // namespace

TEST(Conv2d, ZeroKernelGivesTanhOfBias) {
  ConvLayer<double> l(2, 1, 3, 3, Activation::Tanh);
  l.bias = {0.3, -1.2};
  std::mt19937_64 rng(1);
  const auto out = conv2d_forward(random_tensor(1, 4, 5, rng), l);
  for (std::size_t n = 0; n < out.plane_size(); ++n) {
    EXPECT_DOUBLE_EQ(out.plane(0)[n], std::tanh(0.3));
    EXPECT_DOUBLE_EQ(out.plane(1)[n], std::tanh(-1.2));
  }
}

TEST(Conv2d, OneByOneIdentityScales) {
  ConvLayer<double> l(1, 1, 1, 1, Activation::Identity);
  l.kernel = {2.5};
  std::mt19937_64 rng(2);
  const auto in = random_tensor(1, 3, 3, rng);
  const auto out = conv2d_forward(in, l);
  for (std::size_t n = 0; n < in.size(); ++n) EXPECT_DOUBLE_EQ(out.data()[n], 2.5 * in.data()[n]);
}

TEST(Conv2d, MatchesNaiveOracle) {
  std::mt19937_64 rng(3);
  for (auto [k, act] : {std::pair{3, Activation::Identity}, {2, Activation::Identity}, {3, Activation::Tanh}}) {
    ConvLayer<double> l(3, 2, k, k, act);
    randomize(l, rng);
    const auto in = random_tensor(2, 5, 5, rng);
    auto ref = reference_conv(in, l);
    if (act == Activation::Tanh)
      for (auto& v : ref.data()) v = std::tanh(v);
    const auto out = conv2d_forward(in, l);
    for (std::size_t n = 0; n < out.size(); ++n) EXPECT_NEAR(out.data()[n], ref.data()[n], 1e-12);
  }
}

TEST(Conv2d, EvenKernelAnchorIsTopLeft) {
  ConvLayer<double> l(1, 1, 2, 2, Activation::Identity);
  l.w(0, 0, 1, 1) = 1.0;  // picks (r+1, c+1)
  Tensor3<double> in(1, 3, 3);
  for (std::size_t n = 0; n < 9; ++n) in.data()[n] = static_cast<double>(n);
  const auto out = conv2d_forward(in, l);
  EXPECT_EQ(out(0, 0, 0), in(0, 1, 1));
  EXPECT_EQ(out(0, 1, 1), in(0, 2, 2));
  EXPECT_EQ(out(0, 2, 2), 0.0);  // zero padding
}

TEST(Conv2d, ChannelMismatchThrows) {
  ConvLayer<double> l(1, 2, 3, 3, Activation::Tanh);
  EXPECT_THROW(conv2d_forward(Tensor3<double>(3, 4, 4), l), DimensionError);
}

TEST(Conv2dBackward, ZeroUpstreamGivesZeroGradients) {
  std::mt19937_64 rng(4);
  ConvLayer<double> l(2, 2, 3, 3, Activation::Tanh);
  randomize(l, rng);
  const auto in = random_tensor(2, 4, 4, rng);
  const auto g = conv2d_backward(in, l, Tensor3<double>(2, 4, 4));
  for (double v : g.grad.kernel) EXPECT_EQ(v, 0.0);
  for (double v : g.grad.bias) EXPECT_EQ(v, 0.0);
  for (double v : g.grad_input.data()) EXPECT_EQ(v, 0.0);
}

TEST(Conv2dBackward, FiniteDifferences) {
  std::mt19937_64 rng(5);
  for (std::size_t k : {3u, 2u}) {
    for (auto act : {Activation::Tanh, Activation::Identity}) {
      ConvLayer<double> l(3, 2, k, k, act);
      randomize(l, rng);
      auto in = random_tensor(2, 4, 4, rng);
      const auto up = random_tensor(3, 4, 4, rng);
      const auto g = conv2d_backward(in, l, up);
      auto f = [&] { return weighted_sum(conv2d_forward(in, l), up); };
      for (std::size_t n = 0; n < l.kernel.size(); ++n)
        EXPECT_LT(rel_err(central_diff(&l.kernel[n], f), g.grad.kernel[n]), kFdTol);
      for (std::size_t n = 0; n < l.bias.size(); ++n)
        EXPECT_LT(rel_err(central_diff(&l.bias[n], f), g.grad.bias[n]), kFdTol);
      for (std::size_t n = 0; n < in.size(); ++n)
        EXPECT_LT(rel_err(central_diff(&in.data()[n], f), g.grad_input.data()[n]), kFdTol);
    }
  }
}

TEST(Conv2dBackward, BiasGradientOneByOne) {
  std::mt19937_64 rng(6);
  ConvLayer<double> l(1, 1, 1, 1, Activation::Tanh);
  randomize(l, rng);
  const auto in = random_tensor(1, 3, 3, rng);
  const auto up = random_tensor(1, 3, 3, rng);
  const auto out = conv2d_forward(in, l);
  double expect = 0;
  for (std::size_t n = 0; n < 9; ++n) expect += up.data()[n] * (1 - out.data()[n] * out.data()[n]);
  EXPECT_NEAR(conv2d_backward(in, l, up).grad.bias[0], expect, 1e-12);
}

TEST(UnaryNetwork, ReferenceGeometryShape) {
  std::mt19937_64 rng(7);
  const auto net = make_unary_network<double>(1, 3, 100, rng);
  ASSERT_EQ(net.size(), 3u);
  EXPECT_EQ(net[0].kh, 3u);
  EXPECT_EQ(net[1].kh, 2u);
  EXPECT_EQ(net[2].kw, 2u);
  const auto out = unary_forward(random_tensor(1, 16, 16, rng), net);
  EXPECT_EQ(out.channels(), 100u);
  EXPECT_EQ(out.height(), 16u);
  EXPECT_EQ(out.width(), 16u);
  for (double v : out.data()) {
    EXPECT_GT(v, -1.0);
    EXPECT_LT(v, 1.0);
  }
  EXPECT_EQ(make_unary_network<double>(1, 7, 4, rng).size(), 7u);
}

TEST(UnaryNetwork, ZeroWeightsAreSpatiallyUniform) {
  std::mt19937_64 rng(8);
  auto net = make_unary_network<double>(1, 3, 4, rng);
  for (auto& l : net) std::fill(l.kernel.begin(), l.kernel.end(), 0.0);
  net[0].bias = {0.1, 0.2, 0.3, 0.4};
  const auto out = unary_forward(random_tensor(1, 6, 6, rng), net);
  for (std::size_t c = 0; c < 4; ++c)
    for (std::size_t n = 0; n < 36; ++n) EXPECT_EQ(out.plane(c)[n], out.plane(c)[0]);
}

TEST(UnaryNetwork, SiameseDeterminism) {
  std::mt19937_64 rng(9);
  const auto net = make_unary_network<double>(1, 3, 8, rng);
  const auto img = random_tensor(1, 7, 9, rng);
  EXPECT_EQ(unary_forward(img, net), unary_forward(img, net));
}

TEST(UnaryNetwork, StackGradientFiniteDifferences) {
  std::mt19937_64 rng(10);
  auto net = make_unary_network<double>(2, 3, 3, rng);
  auto img = random_tensor(2, 5, 5, rng);
  const auto up = random_tensor(3, 5, 5, rng);
  Tensor3<double> gin;
  const auto grads = stack_backward(net, stack_forward(img, net), up, &gin);
  auto f = [&] { return weighted_sum(unary_forward(img, net), up); };
  for (std::size_t l = 0; l < net.size(); ++l) {
    for (std::size_t n = 0; n < net[l].kernel.size(); ++n)
      EXPECT_LT(rel_err(central_diff(&net[l].kernel[n], f), grads[l].kernel[n]), kFdTol);
    for (std::size_t n = 0; n < net[l].bias.size(); ++n)
      EXPECT_LT(rel_err(central_diff(&net[l].bias[n], f), grads[l].bias[n]), kFdTol);
  }
  for (std::size_t n = 0; n < img.size(); ++n)
    EXPECT_LT(rel_err(central_diff(&img.data()[n], f), gin.data()[n]), kFdTol);
}

TEST(UnaryNetwork, GlorotRange) {
  std::mt19937_64 rng(11);
  ConvLayer<double> l(10, 5, 3, 3, Activation::Tanh);
  glorot_init(l, rng);
  const double lim = std::sqrt(6.0 / (5 * 9 + 10 * 9));
  for (double v : l.kernel) EXPECT_LE(std::abs(v), lim);
  for (double v : l.bias) EXPECT_EQ(v, 0.0);
}

TEST(Activation, AbsDerivative) {
  EXPECT_EQ(detail::activate_derivative(Activation::Abs, 0.0, 0.0), 0.0);
  EXPECT_EQ(detail::activate_derivative(Activation::Abs, -2.0, 2.0), -1.0);
  EXPECT_EQ(detail::activate_derivative(Activation::Abs, 2.0, 2.0), 1.0);
}
