#include <gtest/gtest.h>

#include "cnncrf/correlation.hpp"
#include "test_util.hpp"

using namespace cnncrf;
using namespace testutil;

namespace {

// Single-pixel-row feature maps whose inner products at (0,0) are the given
// scores: phi0 = 1, phi1(0, k) = score_k.
std::pair<Tensor3<double>, Tensor3<double>> scores_at_origin(const std::vector<double>& s) {
  Tensor3<double> a(1, 1, s.size()), b(1, 1, s.size());
  a(0, 0, 0) = 1.0;
  for (std::size_t k = 0; k < s.size(); ++k) b(0, 0, k) = s[k];
  return {a, b};
}

double weighted(const CostVolume<double>& p, const CostVolume<double>& g) {
  double s = 0;
  for (std::size_t n = 0; n < p.size(); ++n) s += p.values()[n] * g.values()[n];
  return s;
}

}  // namespace

TEST(Correlate, TwoLabelScalarExample) {
  auto [a, b] = scores_at_origin({2.0, 0.0});
  const auto p = correlate(a, b, 2);
  EXPECT_NEAR(p(0, 0, 0), std::exp(2.0) / (std::exp(2.0) + 1), 1e-12);
  EXPECT_NEAR(p(0, 0, 1), 1 / (std::exp(2.0) + 1), 1e-12);
  EXPECT_NEAR(p(0, 0, 0), 0.8808, 1e-4);
}

TEST(Correlate, EqualScoresGiveUniform) {
  auto [a, b] = scores_at_origin({0.5, 0.5, 0.5, 0.5});
  const auto p = correlate(a, b, 4);
  for (int k = 0; k < 4; ++k) EXPECT_NEAR(p(0, 0, k), 0.25, 1e-15);
}

TEST(Correlate, ShiftInvariance) {
  auto [a, b] = scores_at_origin({0.3, -1.0, 2.0});
  auto [a2, b2] = scores_at_origin({7.3, 6.0, 9.0});
  const auto p = correlate(a, b, 3), q = correlate(a2, b2, 3);
  for (int k = 0; k < 3; ++k) EXPECT_NEAR(p(0, 0, k), q(0, 0, k), 1e-12);
}

TEST(Correlate, LargeScoresStayFinite) {
  auto [a, b] = scores_at_origin({900.0, 1000.0});
  const auto p = correlate(a, b, 2);
  EXPECT_NEAR(p(0, 0, 1), 1.0, 1e-12);
  EXPECT_TRUE(std::isfinite(p(0, 0, 0)));
}

TEST(Correlate, ValidityAndRowStochastic) {
  std::mt19937_64 rng(1);
  for (auto sign : {DisparitySign::Positive, DisparitySign::Negative}) {
    const auto a = random_tensor(3, 4, 6, rng, -2, 2), b = random_tensor(3, 4, 6, rng, -2, 2);
    const auto p = correlate(a, b, 4, sign);
    for (std::size_t r = 0; r < 4; ++r)
      for (std::size_t c = 0; c < 6; ++c) {
        double s = 0;
        EXPECT_TRUE(p.valid(r, c, 0));
        for (int k = 0; k < 4; ++k) {
          const long tc = static_cast<long>(c) + sign_value(sign) * k;
          EXPECT_EQ(p.valid(r, c, k), tc >= 0 && tc < 6);
          if (p.valid(r, c, k)) {
            EXPECT_GE(p(r, c, k), 0.0);
            s += p(r, c, k);
          } else {
            EXPECT_EQ(p(r, c, k), 0.0);
          }
        }
        EXPECT_NEAR(s, 1.0, 1e-9);
      }
  }
}

TEST(Correlate, FewerLabelsRenormalize) {
  std::mt19937_64 rng(2);
  const auto a = random_tensor(2, 3, 10, rng), b = random_tensor(2, 3, 10, rng);
  const auto big = correlate(a, b, 5), small = correlate(a, b, 3);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c + 2 < 10; ++c) {
      double z = 0;
      for (int k = 0; k < 3; ++k) z += big(r, c, k);
      for (int k = 0; k < 3; ++k) EXPECT_NEAR(small(r, c, k), big(r, c, k) / z, 1e-9);
    }
}

TEST(Correlate, ShapeMismatchThrows) {
  EXPECT_THROW(correlate(Tensor3<double>(2, 3, 4), Tensor3<double>(2, 3, 5), 2), DimensionError);
  EXPECT_THROW(correlate(Tensor3<double>(2, 3, 4), Tensor3<double>(2, 3, 4), 1), DimensionError);
}

TEST(CorrelateBackward, ZeroUpstream) {
  std::mt19937_64 rng(3);
  const auto a = random_tensor(2, 1, 5, rng), b = random_tensor(2, 1, 5, rng);
  const auto p = correlate(a, b, 3);
  const auto g = correlate_backward(a, b, p, CostVolume<double>(1, 5, 3));
  for (double v : g.phi0.data()) EXPECT_EQ(v, 0.0);
  for (double v : g.phi1.data()) EXPECT_EQ(v, 0.0);
}

TEST(CorrelateBackward, FiniteDifferences) {
  std::mt19937_64 rng(4);
  for (auto sign : {DisparitySign::Positive, DisparitySign::Negative}) {
    auto a = random_tensor(2, 1, 6, rng), b = random_tensor(2, 1, 6, rng);
    CostVolume<double> up(1, 6, 3);
    fill_uniform(up.values(), rng);
    const auto p = correlate(a, b, 3, sign);
    const auto g = correlate_backward(a, b, p, up, sign);
    auto f = [&] { return weighted(correlate(a, b, 3, sign), up); };
    for (std::size_t n = 0; n < a.size(); ++n) EXPECT_LT(rel_err(central_diff(&a.data()[n], f), g.phi0.data()[n]), kFdTol);
    for (std::size_t n = 0; n < b.size(); ++n) EXPECT_LT(rel_err(central_diff(&b.data()[n], f), g.phi1.data()[n]), kFdTol);
  }
}

TEST(CorrelateBackward, ConstantUpstreamIsConserved) {
  // a per-pixel constant upstream gradient is orthogonal to the softmax
  std::mt19937_64 rng(5);
  const auto a = random_tensor(2, 2, 5, rng), b = random_tensor(2, 2, 5, rng);
  const auto p = correlate(a, b, 3);
  CostVolume<double> up(2, 5, 3, 0.7);
  const auto g = correlate_backward(a, b, p, up);
  for (double v : g.phi0.data()) EXPECT_NEAR(v, 0.0, 1e-14);
  for (double v : g.phi1.data()) EXPECT_NEAR(v, 0.0, 1e-14);
}

TEST(ArgmaxDecision, Examples) {
  CostVolume<double> p(1, 2, 3);
  p(0, 0, 0) = 0.1, p(0, 0, 1) = 0.7, p(0, 0, 2) = 0.2;
  p(0, 1, 0) = p(0, 1, 1) = p(0, 1, 2) = 1.0 / 3;
  const auto x = argmax_decision(p);
  EXPECT_EQ(x[0], 1);
  EXPECT_EQ(x[1], 0);
}

TEST(ArgmaxDecision, MatchesScanAndMonotoneTransform) {
  std::mt19937_64 rng(6);
  const auto a = random_tensor(3, 5, 8, rng, -2, 2), b = random_tensor(3, 5, 8, rng, -2, 2);
  const auto p = correlate(a, b, 4);
  const auto x = argmax_decision(p);
  auto q = p;
  for (auto& v : q.values()) v = std::exp(3 * v) + 1;
  EXPECT_EQ(argmax_decision(q), x);
  for (std::size_t i = 0; i < p.pixels(); ++i) {
    int best = 0;
    for (int k = 1; k < 4; ++k)
      if (p.pixel_valid(i)[k] && p.pixel(i)[k] > p.pixel(i)[best]) best = k;
    EXPECT_EQ(x[i], best);
  }
}

TEST(UnaryCosts, NegationAndInvalidConstant) {
  std::mt19937_64 rng(7);
  const auto a = random_tensor(2, 2, 4, rng), b = random_tensor(2, 2, 4, rng);
  const auto p = correlate(a, b, 3);
  const auto f = unary_costs(p);
  for (std::size_t n = 0; n < p.size(); ++n)
    EXPECT_EQ(f.values()[n], p.validity()[n] ? -p.values()[n] : kInvalidLabelCost);
}
