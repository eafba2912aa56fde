#include <gtest/gtest.h>

#include "cnncrf/checkpoint.hpp"

using namespace cnncrf;

namespace {

ModelParams sample_model() {
  std::mt19937_64 rng(1);
  Architecture a;
  a.unary_filters = 5;
  a.pairwise_filters = 3;
  a.coord_features = true;
  auto m = make_model(a, rng);
  m.pairwise_mode = PairwiseMode::Learned;
  m.penalty = {0.125, 0.75};
  m.alpha = 3.5;
  m.beta = 1.25;
  return m;
}

}  // namespace

TEST(Checkpoint, RoundTripIsExact) {
  const auto m = sample_model();
  const auto bytes = serialize_model(m);
  const auto r = deserialize_model(bytes);
  EXPECT_EQ(r.unary, m.unary);
  EXPECT_EQ(r.pairwise, m.pairwise);
  EXPECT_EQ(r.pairwise_mode, m.pairwise_mode);
  EXPECT_EQ(r.penalty.P1, m.penalty.P1);
  EXPECT_EQ(r.penalty.P2, m.penalty.P2);
  EXPECT_EQ(r.alpha, m.alpha);
  EXPECT_EQ(r.beta, m.beta);
  EXPECT_TRUE(r.coord_features);
  EXPECT_EQ(serialize_model(r), bytes);
}

TEST(Checkpoint, HeaderLayout) {
  const auto bytes = serialize_model(sample_model());
  EXPECT_EQ(bytes.substr(0, 8), "CNNCRFCK");
  EXPECT_EQ(static_cast<unsigned char>(bytes[8]), 1u);  // little-endian version
  EXPECT_EQ(bytes[9], 0);
}

TEST(Checkpoint, RejectsCorruptData) {
  auto bytes = serialize_model(sample_model());
  EXPECT_THROW(deserialize_model(bytes.substr(0, bytes.size() - 1)), FormatError);
  EXPECT_THROW(deserialize_model(bytes + "x"), FormatError);
  auto bad = bytes;
  bad[0] = 'X';
  EXPECT_THROW(deserialize_model(bad), FormatError);
  bad = bytes;
  bad[8] = 9;
  EXPECT_THROW(deserialize_model(bad), FormatError);
}
