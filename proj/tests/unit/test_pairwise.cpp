#include <gtest/gtest.h>

#include "cnncrf/pairwise.hpp"
#include "test_util.hpp"

using namespace cnncrf;
using namespace testutil;

TEST(Rho, TruncatedPenalty) {
  const PenaltyParams p{0.4, 1.5};
  EXPECT_EQ(rho(0, p), 0.0);
  EXPECT_EQ(rho(1, p), 0.4);
  EXPECT_EQ(rho(-1, p), 0.4);
  EXPECT_EQ(rho(7, p), 1.5);
  EXPECT_EQ(rho(-7, p), 1.5);
}

TEST(Penalty, Projection) {
  PenaltyParams p{-0.5, 2.0};
  p.project();
  EXPECT_EQ(p.P1, 0.0);
  EXPECT_EQ(p.P2, 2.0);
  p = {3.0, 1.0};
  p.project();
  EXPECT_EQ(p.P1, 3.0);
  EXPECT_EQ(p.P2, 3.0);
  EXPECT_TRUE(p.satisfies_invariant());
}

TEST(ContrastWeights, Examples) {
  Image img(1, 1, 3);
  img.data() = {0.0, 0.0, std::log(2.0)};
  const auto w = contrast_weights(img, 1.0, 1.0);
  EXPECT_DOUBLE_EQ(w.h(0, 0), 1.0);
  EXPECT_NEAR(w.h(0, 1), 0.5, 1e-15);
  EXPECT_EQ(w.h(0, 2), 0.0);  // unused boundary entry

  std::mt19937_64 rng(1);
  const auto rnd = random_tensor(3, 4, 4, rng);
  const auto w0 = contrast_weights(rnd, 0.0, 2.0);
  for (std::size_t r = 0; r < 4; ++r)
    for (std::size_t c = 0; c < 4; ++c) {
      if (c + 1 < 4) { EXPECT_EQ(w0.h(r, c), 1.0); }
      if (r + 1 < 4) { EXPECT_EQ(w0.v(r, c), 1.0); }
    }
  EXPECT_THROW(contrast_weights(rnd, -1.0, 1.0), std::invalid_argument);
  EXPECT_THROW(contrast_weights(rnd, 1.0, 0.0), std::invalid_argument);
}

TEST(ContrastWeights, MeanAbsoluteOverChannelsAndMonotone) {
  Image img(2, 1, 2);
  img(0, 0, 1) = 1.0;
  img(1, 0, 1) = -3.0;  // mean |diff| = 2
  EXPECT_NEAR(contrast_weights(img, 0.5, 1.0).h(0, 0), std::exp(-1.0), 1e-15);
  double prev = 2.0;
  for (double d = 0; d < 3; d += 0.25) {
    Image g(1, 1, 2);
    g(0, 0, 1) = d;
    const double w = contrast_weights(g, 1.3, 0.7).h(0, 0);
    EXPECT_LE(w, prev);
    prev = w;
  }
}

TEST(PairwiseCnn, NonNegativeAndGeometry) {
  std::mt19937_64 rng(2);
  const auto net = make_pairwise_network<double>(1, 64, rng);
  ASSERT_EQ(net.size(), 3u);
  EXPECT_EQ(net[0].out_channels, 64u);
  EXPECT_EQ(net[1].kh, 3u);
  EXPECT_EQ(net[2].kh, 1u);
  EXPECT_EQ(net[2].out_channels, 2u);
  const auto w = pairwise_cnn_forward(random_tensor(1, 6, 7, rng, -3, 3), net);
  for (double v : w.horizontal) EXPECT_GE(v, 0.0);
  for (double v : w.vertical) EXPECT_GE(v, 0.0);
  auto bad = net;
  bad[2].activation = Activation::Tanh;
  EXPECT_THROW(pairwise_cnn_forward(random_tensor(1, 6, 7, rng), bad), DimensionError);
  bad = net;
  bad.pop_back();
  EXPECT_THROW(pairwise_cnn_forward(random_tensor(1, 6, 7, rng), bad), DimensionError);
}

TEST(PairwiseCnn, ZeroFinalLayerGivesAbsBias) {
  std::mt19937_64 rng(3);
  auto net = make_pairwise_network<double>(1, 4, rng);
  std::fill(net[2].kernel.begin(), net[2].kernel.end(), 0.0);
  net[2].bias = {-0.3, 0.8};
  const auto w = pairwise_cnn_forward(random_tensor(1, 3, 3, rng), net);
  EXPECT_DOUBLE_EQ(w.h(1, 1), 0.3);
  EXPECT_DOUBLE_EQ(w.v(1, 1), 0.8);
}

TEST(PairwiseCnn, BackwardFiniteDifferences) {
  std::mt19937_64 rng(4);
  auto net = make_pairwise_network<double>(2, 3, rng);
  for (auto& l : net) randomize(l, rng, 0.6);
  const auto img = random_tensor(2, 4, 5, rng);
  EdgeWeights<double> up(4, 5);
  fill_uniform(up.horizontal, rng);
  fill_uniform(up.vertical, rng);
  up.clear_boundary();
  auto f = [&] {
    const auto w = pairwise_cnn_forward(img, net);
    double s = 0;
    for (std::size_t n = 0; n < w.horizontal.size(); ++n) s += w.horizontal[n] * up.horizontal[n] + w.vertical[n] * up.vertical[n];
    return s;
  };
  // keep the abs kink away from the evaluation point
  const auto pre = stack_forward(img, net).layers.back().pre;
  for (double v : pre.data()) ASSERT_GT(std::abs(v), 1e-3);
  const auto g = pairwise_cnn_backward(net, stack_forward(img, net), up);
  for (std::size_t l = 0; l < net.size(); ++l) {
    for (std::size_t n = 0; n < net[l].kernel.size(); ++n)
      EXPECT_LT(rel_err(central_diff(&net[l].kernel[n], f), g[l].kernel[n]), kFdTol);
    for (std::size_t n = 0; n < net[l].bias.size(); ++n)
      EXPECT_LT(rel_err(central_diff(&net[l].bias[n], f), g[l].bias[n]), kFdTol);
  }
}

TEST(PairwiseCnn, ZeroUpstreamAndAbsAntisymmetry) {
  std::mt19937_64 rng(5);
  auto net = make_pairwise_network<double>(1, 3, rng);
  const auto img = random_tensor(1, 3, 3, rng);
  const auto zero = pairwise_cnn_backward(net, stack_forward(img, net), EdgeWeights<double>(3, 3));
  for (const auto& g : zero) {
    for (double v : g.kernel) EXPECT_EQ(v, 0.0);
    for (double v : g.bias) EXPECT_EQ(v, 0.0);
  }
  // flipping the sign of the last layer leaves the output unchanged and
  // flips its gradient
  EdgeWeights<double> up(3, 3, 1.0);
  const auto g1 = pairwise_cnn_backward(net, stack_forward(img, net), up);
  auto flipped = net;
  for (auto& v : flipped[2].kernel) v = -v;
  for (auto& v : flipped[2].bias) v = -v;
  EXPECT_EQ(pairwise_cnn_forward(img, net).horizontal, pairwise_cnn_forward(img, flipped).horizontal);
  const auto g2 = pairwise_cnn_backward(flipped, stack_forward(img, flipped), up);
  for (std::size_t n = 0; n < g1[2].kernel.size(); ++n) EXPECT_NEAR(g1[2].kernel[n], -g2[2].kernel[n], 1e-14);
  for (std::size_t n = 0; n < g1[0].kernel.size(); ++n) EXPECT_NEAR(g1[0].kernel[n], g2[0].kernel[n], 1e-14);
}
