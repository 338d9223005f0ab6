#include <gtest/gtest.h>

#include <cmath>

#include "qf/posenc.hpp"
#include "support.hpp"

using namespace qf;
using namespace qf::posenc;

TEST(EncodeScalar, ZeroIsSinZeroCosOne) {
  for (std::size_t dims : {2u, 8u, 64u}) {
    auto e = encode_scalar(0.0, dims);
    for (std::size_t j = 0; j < dims / 2; ++j) {
      EXPECT_EQ(e[2 * j], 0.0);
      EXPECT_EQ(e[2 * j + 1], 1.0);
    }
  }
}

TEST(EncodeScalar, PairsLieOnTheUnitCircle) {
  RngStream rng(1);
  for (int trial = 0; trial < 200; ++trial) {
    auto e = encode_scalar(rng.uniform(), 32);
    for (std::size_t j = 0; j < 16; ++j) EXPECT_NEAR(e[2 * j] * e[2 * j] + e[2 * j + 1] * e[2 * j + 1], 1.0, 1e-15);
  }
}

TEST(EncodeScalar, HalfWithFourDims) {
  const double f1 = 0.5 / std::sqrt(10000.0);
  const std::vector<double> oracle{std::sin(0.5), std::cos(0.5), std::sin(f1), std::cos(f1)};
  auto e = encode_scalar(0.5, 4, 10000.0);
  for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(e[i], oracle[i], 1e-15);
}

TEST(EncodeScalar, OddDimsRejected) {
  EXPECT_THROW(encode_scalar(0.2, 7), std::invalid_argument);
}

TEST(EncodeScalar, InjectiveOverThousandPointSweep) {
  std::vector<std::vector<double>> enc;
  for (int i = 0; i < 1000; ++i) enc.push_back(encode_scalar(i / 999.0, 16));
  double closest = 1e9;
  for (std::size_t a = 0; a < enc.size(); ++a)
    for (std::size_t b = a + 1; b < enc.size(); ++b) {
      double dmax = 0;
      for (std::size_t k = 0; k < 16; ++k) dmax = std::max(dmax, std::abs(enc[a][k] - enc[b][k]));
      closest = std::min(closest, dmax);
    }
  EXPECT_GT(closest, 0.0);
}

TEST(EncodeBox, ZeroBoxIsSinZeroCosOne) {
  auto e = encode_box({0, 0, 0, 0}, {16, 10000});
  for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(e[i], i % 2 ? 1.0 : 0.0);
}

TEST(EncodeBox, SegmentsComposeFromScalarEncodings) {
  const Box b{0.5, 0.25, 0.1, 0.1};
  auto e = encode_box(b, {8, 10000});
  for (std::size_t c = 0; c < 4; ++c) {
    auto s = encode_scalar(b[c], 2);
    EXPECT_EQ(e[2 * c], s[0]);
    EXPECT_EQ(e[2 * c + 1], s[1]);
  }
}

TEST(EncodeBox, SwappingCoordinatesSwapsSegments) {
  const BoxEncodingConfig cfg{32, 10000};
  auto a = encode_box({0.1, 0.7, 0.3, 0.9}, cfg);
  auto b = encode_box({0.7, 0.1, 0.3, 0.9}, cfg);
  for (std::size_t k = 0; k < 8; ++k) {
    EXPECT_EQ(a[k], b[8 + k]);
    EXPECT_EQ(a[8 + k], b[k]);
    EXPECT_EQ(a[16 + k], b[16 + k]);
  }
}

TEST(EncodeBox, OutOfRangeRejected) {
  EXPECT_THROW(encode_box({0.5, 1.2, 0.1, 0.1}, {}), std::out_of_range);
  EXPECT_THROW(encode_box({-0.01, 0.5, 0.1, 0.1}, {}), std::out_of_range);
  EXPECT_THROW(encode_box({0.5, 0.5, 0.1, 0.1}, {12, 10000}), std::invalid_argument);
}

TEST(EncodeBox, LipschitzUnderSmallPerturbation) {
  RngStream rng(2);
  const BoxEncodingConfig cfg{64, 10000};
  const double delta = 1e-4, bound = 2.0 * M_PI * delta * frequency(0, cfg.segment(), cfg.temperature);
  for (int trial = 0; trial < 200; ++trial) {
    Box b{rng.uniform(0.01, 0.99), rng.uniform(0.01, 0.99), rng.uniform(0.01, 0.99), rng.uniform(0.01, 0.99)};
    auto e0 = encode_box(b, cfg);
    Box p = b;
    p[trial % 4] += (trial % 2 ? delta : -delta);
    auto e1 = encode_box(p, cfg);
    for (std::size_t k = 0; k < e0.size(); ++k) EXPECT_LE(std::abs(e0[k] - e1[k]), bound);
  }
}

TEST(EncodeBoxes, MatchesScalarPathAndHasGradients) {
  RngStream rng(3);
  auto boxes = qf::testing::random_tensor({3, 4}, rng, 0.05, 0.95);
  const BoxEncodingConfig cfg{16, 10000};
  {
    Tape t;
    auto e = encode_boxes(t.constant(boxes), cfg);
    for (std::size_t i = 0; i < 3; ++i) {
      auto ref = encode_box({boxes.at(i, 0), boxes.at(i, 1), boxes.at(i, 2), boxes.at(i, 3)}, cfg);
      for (std::size_t k = 0; k < 16; ++k) EXPECT_EQ(e.value()[i * 16 + k], ref[k]);
    }
  }
  auto r = grad_check([&](Tape& t) { return qf::testing::probe(encode_boxes(t.param(boxes), cfg)); }, {{"boxes", &boxes}});
  EXPECT_TRUE(r.passed(1e-6)) << r.max_rel_err;
}

TEST(EncodeGrid, SameRowSharesRowSegment) {
  auto g = encode_grid(3, 4, 8);
  for (std::size_t c = 1; c < 4; ++c)
    for (std::size_t k = 0; k < 4; ++k) EXPECT_EQ(g.at(1 * 4 + c, k), g.at(1 * 4, k));
}

TEST(EncodeGrid, SingleCellIsCentre) {
  auto g = encode_grid(1, 1, 8);
  auto s = encode_scalar(0.5, 4);
  for (std::size_t k = 0; k < 4; ++k) {
    EXPECT_EQ(g.at(0, k), s[k]);
    EXPECT_EQ(g.at(0, 4 + k), s[k]);
  }
}

TEST(EncodeGrid, TwoByTwoFromQuarterPoints) {
  auto g = encode_grid(2, 2, 8);
  const double centres[2] = {0.25, 0.75};
  for (std::size_t r = 0; r < 2; ++r)
    for (std::size_t c = 0; c < 2; ++c) {
      auto er = encode_scalar(centres[r], 4), ec = encode_scalar(centres[c], 4);
      for (std::size_t k = 0; k < 4; ++k) {
        EXPECT_EQ(g.at(r * 2 + c, k), er[k]);
        EXPECT_EQ(g.at(r * 2 + c, 4 + k), ec[k]);
      }
    }
}

TEST(EncodeGrid, DimsNotDivisibleByFourRejected) {
  EXPECT_THROW(encode_grid(2, 2, 6), std::invalid_argument);
}
