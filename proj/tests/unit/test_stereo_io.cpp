#include <gtest/gtest.h>

#include <cstring>
#include <random>

#include "cnncrf/stereo_io.hpp"

using namespace cnncrf;

namespace {

double mean_of(const Image& img) {
  double s = 0;
  for (double v : img.data()) s += v;
  return s / static_cast<double>(img.size());
}

double var_of(const Image& img) {
  const double m = mean_of(img);
  double s = 0;
  for (double v : img.data()) s += (v - m) * (v - m);
  return s / static_cast<double>(img.size());
}

std::string le_float_bytes(std::initializer_list<float> vals) {
  std::string out;
  for (float f : vals) {
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    for (int b = 0; b < 4; ++b) out.push_back(static_cast<char>((u >> (8 * b)) & 0xFF));
  }
  return out;
}

}  // namespace

TEST(NormalizeImage, ConstantImageMapsToZeros) {
  Image img(1, 3, 4, 7.0);
  const auto out = normalize_image(img);
  for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(NormalizeImage, TwoPixels) {
  Image img(1, 1, 2);
  img.data() = {0.0, 2.0};
  const auto n = normalize_image(img);
  EXPECT_DOUBLE_EQ(n.data()[0], -1.0);
  EXPECT_DOUBLE_EQ(n.data()[1], 1.0);
}

TEST(NormalizeImage, RandomMomentsAndIdempotence) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(-5, 20);
  Image img(2, 8, 8);
  for (auto& v : img.data()) v = u(rng);
  const auto n = normalize_image(img);
  EXPECT_LT(std::abs(mean_of(n)), 1e-9);
  EXPECT_LT(std::abs(var_of(n) - 1.0), 1e-6);
  const auto nn = normalize_image(n);
  EXPECT_LT(std::abs(mean_of(nn) - mean_of(n)), 1e-6);
  EXPECT_LT(std::abs(var_of(nn) - var_of(n)), 1e-6);
}

TEST(CoordinateFeatures, Shapes) {
  Image one(1, 1, 1, 0.5);
  const auto a = append_coordinate_features(one);
  ASSERT_EQ(a.channels(), 3u);
  EXPECT_EQ(a(1, 0, 0), 0.0);
  EXPECT_EQ(a(2, 0, 0), 0.0);

  Image two(3, 2, 2);
  const auto b = append_coordinate_features(two);
  ASSERT_EQ(b.channels(), 5u);
  for (std::size_t r = 0; r < 2; ++r) {
    EXPECT_EQ(b(3, r, 0), 0.0);
    EXPECT_EQ(b(3, r, 1), 0.5);
  }
  EXPECT_EQ(b(4, 1, 0), 0.5);
}

TEST(Pfm, HandBuiltTwoByOne) {
  const std::string bytes = "Pf\n2 1\n-1.0\n" + le_float_bytes({1.5f, 3.0f});
  const auto pfm = read_pfm(bytes);
  EXPECT_EQ(pfm.width, 2u);
  EXPECT_EQ(pfm.height, 1u);
  EXPECT_EQ(pfm.values[0], 1.5f);
  EXPECT_EQ(pfm.values[1], 3.0f);
  EXPECT_EQ(write_pfm(pfm), bytes);
}

TEST(Pfm, RowsStoredBottomUp) {
  const std::string bytes = "Pf\n1 2\n-1.0\n" + le_float_bytes({10.0f, 20.0f});
  const auto gt = to_ground_truth(read_pfm(bytes));
  EXPECT_EQ(gt.disparity[0], 20.0);  // top row is the last stored
  EXPECT_EQ(gt.disparity[1], 10.0);
}

TEST(Pfm, NonFiniteIsInvalid) {
  const float inf = std::numeric_limits<float>::infinity();
  const auto gt = to_ground_truth(read_pfm("Pf\n2 1\n-1\n" + le_float_bytes({inf, 4.0f})));
  EXPECT_FALSE(gt.valid[0]);
  EXPECT_TRUE(gt.valid[1]);
  EXPECT_EQ(gt.valid_count(), 1u);
}

TEST(Pfm, BigEndianPayload) {
  std::string be;
  for (float f : {2.0f}) {
    std::uint32_t u;
    std::memcpy(&u, &f, 4);
    for (int b = 3; b >= 0; --b) be.push_back(static_cast<char>((u >> (8 * b)) & 0xFF));
  }
  const auto pfm = read_pfm("Pf\n1 1\n1.0\n" + be);
  EXPECT_EQ(pfm.values[0], 2.0f);
  EXPECT_EQ(write_pfm(pfm), "Pf\n1 1\n1.0\n" + be);
}

TEST(Pfm, Errors) {
  EXPECT_THROW(read_pfm("Qf\n2 1\n-1.0\n" + le_float_bytes({1, 2})), FormatError);
  EXPECT_THROW(read_pfm("PF\n1 1\n-1.0\n" + le_float_bytes({1, 2, 3})), FormatError);
  EXPECT_THROW(read_pfm("Pf\n2 1\n-1.0\n" + le_float_bytes({1})), FormatError);
  EXPECT_THROW(read_pfm("Pf\n0 1\n-1.0\n"), FormatError);
  EXPECT_THROW(read_pfm("Pf\n2 1\nabc\n" + le_float_bytes({1, 2})), FormatError);
}

TEST(Pfm, RandomRoundTripIsBitExact) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<float> u(-100, 100);
  PfmImage img{5, 7, "-1.000000", {}};
  for (int i = 0; i < 35; ++i) img.values.push_back(u(rng));
  const std::string bytes = write_pfm(img);
  EXPECT_EQ(write_pfm(read_pfm(bytes)), bytes);
}

TEST(Pgm, ScalesToUnitRange) {
  const std::string bytes = std::string("P5\n2 2\n255\n") + '\x00' + '\xff' + '\x00' + '\xff';
  const auto img = read_pgm(bytes);
  EXPECT_EQ(img.data(), (std::vector<double>{0, 1, 0, 1}));
  EXPECT_EQ(write_pgm(img), bytes);
}

TEST(Pgm, SixteenBitRoundTrip) {
  std::string bytes = "P5\n3 1\n65535\n";
  for (unsigned v : {0u, 1234u, 65535u}) {
    bytes.push_back(static_cast<char>(v >> 8));
    bytes.push_back(static_cast<char>(v & 0xFF));
  }
  EXPECT_EQ(write_pgm(read_pgm(bytes), 65535), bytes);
}

TEST(Pgm, CommentsAndErrors) {
  const auto img = read_pgm(std::string("P5\n# comment\n1 1\n255\n") + '\x80');
  EXPECT_NEAR(img.data()[0], 128.0 / 255.0, 1e-15);
  EXPECT_THROW(read_pgm(std::string("P5\n1 1\n0\n") + '\x00'), FormatError);
  EXPECT_THROW(read_pgm("P5\n2 2\n255\n\x01"), FormatError);
  EXPECT_THROW(read_pgm("P2\n1 1\n255\n1"), FormatError);
}

TEST(Synth, WarpIdentityOnValidPixels) {
  for (auto sign : {DisparitySign::Positive, DisparitySign::Negative}) {
    const auto s = synth_random_dot(11, 24, 40, 6, 3, {sign, 0.35});
    const int sg = sign_value(sign);
    std::size_t checked = 0;
    for (std::size_t r = 0; r < 24; ++r)
      for (std::size_t c = 0; c < 40; ++c) {
        if (!s.gt->valid[r * 40 + c]) continue;
        const int d = static_cast<int>(s.gt->disparity[r * 40 + c]);
        ASSERT_EQ(s.right(0, r, static_cast<std::size_t>(static_cast<int>(c) + sg * d)), s.left(0, r, c));
        ++checked;
      }
    EXPECT_GT(checked, 0u);
  }
}

TEST(Synth, Deterministic) {
  const auto a = synth_random_dot(5, 16, 32, 8, 4);
  const auto b = synth_random_dot(5, 16, 32, 8, 4);
  EXPECT_EQ(a.left, b.left);
  EXPECT_EQ(a.right, b.right);
  EXPECT_EQ(a.gt->disparity, b.gt->disparity);
  const auto c = synth_random_dot(6, 16, 32, 8, 4);
  EXPECT_FALSE(a.left == c.left);
}

TEST(Synth, InvalidFractionBelowThirtyPercent) {
  std::size_t invalid = 0, total = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    const auto s = synth_random_dot(seed, 32, 48, 8, 4);
    total += s.gt->valid.size();
    invalid += s.gt->valid.size() - s.gt->valid_count();
  }
  EXPECT_LT(static_cast<double>(invalid) / static_cast<double>(total), 0.30);
}

TEST(Synth, RejectsTooManyLabels) {
  EXPECT_THROW(synth_random_dot(1, 8, 16, 5, 2), std::invalid_argument);
}

TEST(StereoSample, ValidateShapes) {
  StereoSample s;
  s.left = Image(1, 4, 4);
  s.right = Image(1, 4, 5);
  EXPECT_THROW(s.validate(), DimensionError);
  s.right = Image(1, 4, 4);
  s.label_count = 1;
  EXPECT_THROW(s.validate(), DimensionError);
}
