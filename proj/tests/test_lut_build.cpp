#include <gtest/gtest.h>

#include <random>

#include "bitlut/lut_build.hpp"
#include "test_util.hpp"

using namespace bitlut;

namespace {
// Brute force over all sign patterns, j ascending.
float signed_sum(std::span<const float> a, unsigned idx) {
  float s = 0.0f;
  for (std::size_t j = 0; j < a.size(); ++j) s += ((idx >> j) & 1u) ? a[j] : -a[j];
  return s;
}
}  // namespace

TEST(PrecomputeLut, SignPatternsOfFourActivations) {
  const std::vector<float> a{0.5f, -1.25f, 2.0f, 3.5f};
  const auto t = precompute_lut(a, 4);
  EXPECT_EQ(t.at(0, 0b0000), -a[0] - a[1] - a[2] - a[3]);
  EXPECT_EQ(t.at(0, 0b0101), a[0] - a[1] + a[2] - a[3]);
}

TEST(PrecomputeLut, OnesGroup) {
  const std::vector<float> a{1, 1, 1, 1};
  const auto t = precompute_lut(a, 4);
  EXPECT_EQ(t.at(0, 0), -4.0f);
  EXPECT_EQ(t.at(0, 15), 4.0f);
  EXPECT_EQ(t.at(0, 5), 0.0f);
}

TEST(PrecomputeLut, MatchesBruteForce) {
  std::mt19937 gen(1);
  for (int g = 1; g <= 8; ++g) {
    const auto m = testutil::random_matrix(1, static_cast<std::size_t>(g) * 2, gen);
    const auto t = precompute_lut(m.row(0), g);
    for (std::size_t kg = 0; kg < 2; ++kg) {
      for (unsigned idx = 0; idx < (1u << g); ++idx) {
        EXPECT_EQ(t.at(kg, idx), signed_sum(m.row(0).subspan(kg * g, g), idx)) << "g=" << g;
      }
    }
  }
}

TEST(PrecomputeLut, SignSymmetryExact) {
  std::mt19937 gen(2);
  const auto m = testutil::random_matrix(1, 64, gen, -100.0f, 100.0f);
  const auto t = precompute_lut(m.row(0), 4);
  for (std::size_t kg = 0; kg < 16; ++kg) {
    for (unsigned idx = 0; idx < 16; ++idx) EXPECT_EQ(t.at(kg, idx), -t.at(kg, 15 - idx));
  }
}

TEST(PrecomputeLut, Errors) {
  EXPECT_THROW(precompute_lut(std::vector<float>{1, 2, 3}, 2), ShapeError);
  EXPECT_THROW(precompute_lut(std::vector<float>{1, std::numeric_limits<float>::quiet_NaN()}, 2), InputError);
}

TEST(BuildHalfTable, MatchesLowHalfOfFullTable) {
  std::mt19937 gen(3);
  for (int g = 1; g <= 8; ++g) {
    const auto m = testutil::random_matrix(1, static_cast<std::size_t>(g), gen);
    std::vector<float> half(std::size_t{1} << (g - 1));
    build_half_table(m.row(0), half);
    const auto full = precompute_lut(m.row(0), g);
    for (unsigned i = 0; i < half.size(); ++i) EXPECT_EQ(half[i], full.at(0, i));
  }
}

TEST(MirrorConsolidate, HighIndexIsNegatedComplement) {
  std::mt19937 gen(4);
  const auto m = testutil::random_matrix(1, 4, gen);
  const auto lut = mirror_consolidate(precompute_lut(m.row(0), 4));
  EXPECT_EQ(lut.value(0, 0, 9), -lut.entries[6]);
}

TEST(MirrorConsolidate, RoundTripAndHalfSize) {
  std::mt19937 gen(5);
  for (int g = 1; g <= 8; ++g) {
    const auto m = testutil::random_matrix(1, static_cast<std::size_t>(g) * 3, gen);
    const auto full = precompute_lut(m.row(0), g);
    const auto lut = mirror_consolidate(full);
    EXPECT_EQ(lut.entries.size() * 2, full.entries.size());
    EXPECT_EQ(lut.allocated_bytes() * 2, LookupTables::unconsolidated_bytes(1, 3, g, TableMode::real));
    EXPECT_EQ(reconstruct_full(lut), full);
    for (unsigned idx = 0; idx < (1u << g); ++idx) {
      EXPECT_EQ(full.at(0, idx) + full.at(0, (1u << g) - 1 - idx), 0.0f);
    }
  }
}

TEST(BuildTables, WorkingSetMatchesTileFormula) {
  std::mt19937 gen(6);
  for (const TileConfig& c : {TileConfig{1, 16, 128, 4, 16}, TileConfig{4, 16, 64, 4, 16}, TileConfig{8, 16, 32, 2, 16},
                              TileConfig{4, 16, 24, 3, 16}}) {
    const auto a = testutil::random_matrix(c.n_tile, c.k_tile, gen);
    const auto lut = build_tables(a, c.g);
    EXPECT_EQ(lut.entries.size(), c.lut_entries());
    EXPECT_EQ(lut.allocated_bytes(), c.lut_entries() * sizeof(float));
    for (std::size_t r = 0; r < a.rows(); ++r) {
      EXPECT_EQ(reconstruct_full(lut, r), precompute_lut(a.row(r), c.g));
    }
  }
}

TEST(QuantizeTables, EndpointsMapToFullRange) {
  const std::vector<float> a{1, 1, 1, 1};
  const auto q = quantize_tables(mirror_consolidate(precompute_lut(a, 4)));
  EXPECT_FLOAT_EQ(q.table_scales[0], 4.0f / 127.0f);
  EXPECT_EQ(q.qvalue(0, 0, 15), 127);
  EXPECT_EQ(q.qvalue(0, 0, 0), -127);
}

TEST(QuantizeTables, AllZeroTable) {
  const std::vector<float> a{0, 0, 0, 0};
  const auto q = quantize_tables(mirror_consolidate(precompute_lut(a, 4)));
  EXPECT_EQ(q.table_scales[0], 1.0f);
  for (auto v : q.qentries) EXPECT_EQ(v, 0);
}

TEST(QuantizeTables, ErrorWithinHalfScale) {
  std::mt19937 gen(7);
  for (std::size_t tps : {1u, 2u, 8u}) {
    const auto a = testutil::random_matrix(3, 256, gen, -3.0f, 3.0f);
    const auto real = build_tables(a, 4);
    const auto q = quantize_tables(real, tps);
    EXPECT_EQ(q.table_scales.size(), 3 * 64 / tps);
    for (std::size_t r = 0; r < 3; ++r) {
      for (std::size_t kg = 0; kg < 64; ++kg) {
        const float s = q.table_scale(r, kg);
        for (unsigned idx = 0; idx < 16; ++idx) {
          EXPECT_LE(std::abs(q.qvalue(r, kg, idx)), 127);
          EXPECT_LE(std::fabs(q.value(r, kg, idx) - real.value(r, kg, idx)), s / 2 * (1 + 1e-6f));
        }
      }
    }
  }
}

TEST(QuantizeTables, RoundsHalfAwayFromZero) {
  // Entries ±(127, 0.5, 1.5, 2.5) after scaling: a table whose peak is exactly 127.
  LookupTables lut;
  lut.n = 1;
  lut.k_groups = 1;
  lut.g = 3;
  lut.entries = {127.0f, 0.5f, -1.5f, 2.5f};
  const auto q = quantize_tables(lut);
  EXPECT_EQ(q.table_scales[0], 1.0f);
  EXPECT_EQ(q.qentries, (std::vector<std::int8_t>{127, 1, -2, 3}));
}

TEST(RowSums, Examples) {
  Matrix a(2, 4, std::vector<float>{1, 2, 3, 4, 0, 0, 0, 0});
  const auto s = row_sums(a, 4);
  EXPECT_EQ(s.at(0, 0), 10.0f);
  EXPECT_EQ(s.at(1, 0), 0.0f);
}

TEST(RowSums, MatchesLeftToRightSummation) {
  std::mt19937 gen(8);
  const auto a = testutil::random_matrix(3, 96, gen);
  const auto s = row_sums(a, 32);
  for (std::size_t r = 0; r < 3; ++r) {
    for (std::size_t gq = 0; gq < 3; ++gq) {
      float ref = 0.0f;
      for (std::size_t j = 0; j < 32; ++j) ref += a(r, gq * 32 + j);
      EXPECT_EQ(s.at(r, gq), ref);
    }
  }
  EXPECT_THROW(row_sums(a, 36), ShapeError);
}
