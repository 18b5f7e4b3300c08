#include <gtest/gtest.h>

#include <cstring>
#include <random>

#include "bitlut/weight_prep.hpp"
#include "test_util.hpp"

using namespace bitlut;

namespace {

QuantizedWeights row_of(int bits, std::vector<std::uint8_t> q) {
  QuantizedWeights qw;
  qw.m = 1;
  qw.k = q.size();
  qw.bits = bits;
  qw.group_size = q.size();
  qw.qvalues = std::move(q);
  qw.scales = {1.0f};
  return qw;
}

// Expected packed byte for (row, kg) of one plane, from the documented layout alone:
// within an M-block stripe, lane units are ordered (K tile, lane chunk, k-group in tile);
// unit u sits in byte block u / slots_per_byte at slot u % slots_per_byte.
struct LayoutOracle {
  TileConfig t;
  std::size_t k_groups;

  std::size_t spb() const { return t.g <= 2 ? 4 : (t.g <= 4 ? 2 : 1); }
  unsigned shift(std::size_t slot) const {
    if (spb() == 2) return static_cast<unsigned>(slot * 4);
    if (spb() == 4) return static_cast<unsigned>((slot & 1) * 4 + (slot >> 1) * 2);
    return 0;
  }
  std::vector<std::uint8_t> pack(const BitPlane& p) const {
    const std::size_t kgpt = t.k_tile / static_cast<std::size_t>(t.g);
    const std::size_t chunks = t.m_tile / t.lanes;
    const std::size_t units = chunks * k_groups;
    const std::size_t stripe = units / spb() * t.lanes;
    std::vector<std::uint8_t> out(p.m / t.m_tile * stripe, 0);
    for (std::size_t row = 0; row < p.m; ++row) {
      const std::size_t mb = row / t.m_tile, ml = row % t.m_tile;
      for (std::size_t kg = 0; kg < k_groups; ++kg) {
        const std::size_t u = (kg / kgpt) * chunks * kgpt + (ml / t.lanes) * kgpt + kg % kgpt;
        const std::size_t byte = mb * stripe + (u / spb()) * t.lanes + ml % t.lanes;
        out[byte] |= static_cast<std::uint8_t>(p.at(row, kg) << shift(u % spb()));
      }
    }
    return out;
  }
};

}  // namespace

TEST(DecomposeBits, TwoBitRowSplitsIntoPlanes) {
  const auto planes = decompose_bits(row_of(2, {0, 1, 2, 3}), 4);
  ASSERT_EQ(planes.size(), 2u);
  EXPECT_EQ(planes[0].at(0, 0), 10);
  EXPECT_EQ(planes[1].at(0, 0), 12);
}

TEST(DecomposeBits, OneBitAllSet) { EXPECT_EQ(decompose_bits(row_of(1, {1, 1, 1, 1}), 4)[0].at(0, 0), 15); }

TEST(DecomposeBits, ZeroRowAllPlanesZero) {
  const auto planes = decompose_bits(row_of(4, {0, 0, 0, 0}), 4);
  ASSERT_EQ(planes.size(), 4u);
  for (const auto& p : planes) EXPECT_EQ(p.at(0, 0), 0);
}

TEST(DecomposeBits, RejectsBadG) {
  EXPECT_THROW(decompose_bits(row_of(1, {1, 1, 1, 1}), 0), ParameterError);
  EXPECT_THROW(decompose_bits(row_of(1, {1, 1, 1, 1}), 9), ParameterError);
  EXPECT_THROW(decompose_bits(row_of(1, {1, 1, 1, 1, 1, 1}), 4), LayoutError);
}

TEST(DecomposeBits, PlanesReassembleQvalues) {
  std::mt19937 gen(11);
  for (int bits = 1; bits <= 4; ++bits) {
    for (int g : {1, 2, 3, 4, 8}) {
      const auto qw = testutil::random_quantized(5, 48, bits, 48, gen);
      const auto planes = decompose_bits(qw, g);
      for (std::size_t r = 0; r < qw.m; ++r) {
        for (std::size_t c = 0; c < qw.k; ++c) {
          unsigned v = 0;
          for (int i = 0; i < bits; ++i) {
            v += ((planes[i].at(r, c / g) >> (c % g)) & 1u) << i;
          }
          ASSERT_EQ(v, qw.q(r, c));
        }
      }
    }
  }
}

TEST(Interleave, SixteenLanesNibbleSplit) {
  std::vector<std::uint8_t> idx(32);
  for (std::size_t i = 0; i < 32; ++i) idx[i] = static_cast<std::uint8_t>((i * 7 + 3) % 16);
  const auto out = interleave_layout(idx, 4, 16);
  ASSERT_EQ(out.size(), 16u);
  for (std::size_t j = 0; j < 16; ++j) EXPECT_EQ(out[j], (idx[j + 16] << 4) | idx[j]);
}

TEST(Interleave, UnpackIsMaskAndShift) {
  std::mt19937 gen(5);
  std::uniform_int_distribution<int> d(0, 15);
  std::vector<std::uint8_t> idx(32 * 9);
  for (auto& x : idx) x = static_cast<std::uint8_t>(d(gen));
  const auto packed = interleave_layout(idx, 4, 16);
  for (std::size_t b = 0; b < packed.size() / 16; ++b) {
    for (std::size_t j = 0; j < 16; ++j) {
      EXPECT_EQ(packed[b * 16 + j] & 0x0F, idx[b * 32 + j]);
      EXPECT_EQ(packed[b * 16 + j] >> 4, idx[b * 32 + 16 + j]);
    }
  }
}

TEST(Interleave, RoundTripAllSlotWidths) {
  std::mt19937 gen(6);
  for (int g = 1; g <= 8; ++g) {
    std::uniform_int_distribution<int> d(0, (1 << g) - 1);
    for (std::size_t lanes : {4u, 16u, 32u}) {
      std::vector<std::uint8_t> idx(lanes * 4 * 3);
      for (auto& x : idx) x = static_cast<std::uint8_t>(d(gen));
      EXPECT_EQ(deinterleave_layout(interleave_layout(idx, g, lanes), g, lanes), idx) << "g=" << g;
    }
  }
}

TEST(Interleave, TwoBitSlotsSplitEachNibble) {
  std::vector<std::uint8_t> idx(64);
  for (std::size_t i = 0; i < 64; ++i) idx[i] = static_cast<std::uint8_t>(i / 16);  // unit u holds value u
  const auto out = interleave_layout(idx, 2, 16);
  ASSERT_EQ(out.size(), 16u);
  // units 0,1 low two bits of each nibble; units 2,3 the high two bits
  for (auto b : out) EXPECT_EQ(b, (0u << 0) | (1u << 4) | (2u << 2) | (3u << 6));
}

TEST(Interleave, RejectsRaggedSpan) { EXPECT_THROW(interleave_layout(std::vector<std::uint8_t>(24), 4, 16), LayoutError); }

TEST(PackAndPermute, SingleTileIsInterleavedPlane) {
  std::mt19937 gen(1);
  const TileConfig t{1, 16, 32, 4, 16};
  const auto qw = testutil::random_quantized(16, 32, 2, 32, gen);
  const auto planes = decompose_bits(qw, 4);
  const auto pw = pack_and_permute(planes, t);
  for (int i = 0; i < 2; ++i) {
    // One tile: rows in lane order within each k-group, k-groups ascending.
    std::vector<std::uint8_t> flat;
    for (std::size_t kg = 0; kg < 8; ++kg) {
      for (std::size_t r = 0; r < 16; ++r) flat.push_back(planes[i].at(r, kg));
    }
    EXPECT_EQ(pw.planes[i], interleave_layout(flat, 4, 16));
  }
}

TEST(PackAndPermute, TwoMBlocksConcatenate) {
  std::mt19937 gen(2);
  const TileConfig t{1, 16, 32, 4, 16};
  const auto qw = testutil::random_quantized(32, 32, 3, 32, gen);
  const auto planes = decompose_bits(qw, 4);
  const auto pw = pack_and_permute(planes, t);
  for (int half = 0; half < 2; ++half) {
    std::vector<BitPlane> part = planes;
    for (std::size_t i = 0; i < part.size(); ++i) {
      part[i].m = 16;
      const auto& src = planes[i].indices;
      part[i].indices.assign(src.begin() + half * 16 * 8, src.begin() + (half + 1) * 16 * 8);
    }
    const auto pw_half = pack_and_permute(part, t);
    for (int i = 0; i < 3; ++i) {
      const auto& whole = pw.planes[i];
      const std::size_t sz = pw_half.planes[i].size();
      EXPECT_TRUE(std::equal(pw_half.planes[i].begin(), pw_half.planes[i].end(), whole.begin() + half * sz));
    }
  }
}

TEST(PackAndPermute, MatchesLayoutOracle) {
  std::mt19937 gen(3);
  const std::vector<TileConfig> tiles = {{1, 16, 16, 4, 16}, {1, 32, 64, 4, 16}, {1, 64, 8, 2, 16},
                                         {1, 16, 24, 3, 16}, {1, 8, 16, 8, 8},   {1, 32, 16, 1, 16}};
  for (const auto& t : tiles) {
    const auto qw = testutil::random_quantized(64, 96, 2, 32, gen);
    const auto padded = pad_k(qw, t.k_tile);
    const auto planes = decompose_bits(padded, t.g);
    const auto pw = pack_and_permute(planes, t);
    const LayoutOracle oracle{t, planes[0].k_groups};
    for (int i = 0; i < 2; ++i) EXPECT_EQ(pw.planes[i], oracle.pack(planes[i])) << "g=" << t.g;
    for (std::size_t r = 0; r < pw.m; r += 7) {
      for (std::size_t kg = 0; kg < pw.k_groups(); ++kg) ASSERT_EQ(packed_index(pw, 1, r, kg), planes[1].at(r, kg));
    }
  }
}

TEST(PackAndPermute, Random64RoundTrip) {
  std::mt19937 gen(4);
  const TileConfig t{1, 16, 16, 4, 16};
  const auto qw = testutil::random_quantized(64, 64, 2, 32, gen);
  const auto planes = decompose_bits(qw, 4);
  EXPECT_EQ(unpack_planes(pack_and_permute(planes, t)), planes);
}

TEST(PackAndPermute, DivisibilityErrorsNameDimension) {
  std::mt19937 gen(5);
  const auto planes = decompose_bits(testutil::random_quantized(48, 64, 2, 32, gen), 4);
  try {
    pack_and_permute(planes, TileConfig{1, 32, 16, 4, 16});
    FAIL();
  } catch (const LayoutError& e) {
    EXPECT_NE(std::string(e.what()).find("M="), std::string::npos);
  }
  try {
    pack_and_permute(planes, TileConfig{1, 16, 48, 4, 16});
    FAIL();
  } catch (const LayoutError& e) {
    EXPECT_NE(std::string(e.what()).find("K/g"), std::string::npos);
  }
}

TEST(PadK, PadsWithZeroLevelAndZeroScale) {
  std::mt19937 gen(6);
  const auto qw = testutil::random_quantized(2, 36, 3, 4, gen);
  const auto p = pad_k(qw, 16);
  EXPECT_EQ(p.k, 48u);
  for (std::size_t r = 0; r < 2; ++r) {
    for (std::size_t c = 36; c < 48; ++c) {
      EXPECT_EQ(p.q(r, c), 4);
      EXPECT_EQ(p.scale(r, c), 0.0f);
    }
    for (std::size_t c = 0; c < 36; ++c) EXPECT_EQ(p.q(r, c), qw.q(r, c));
  }
}

TEST(Prepack, PayloadScalesWithBits) {
  std::mt19937 gen(7);
  const TileConfig t{1, 32, 64, 4, 16};
  const auto p1 = prepack(testutil::random_quantized(64, 128, 1, 32, gen), t);
  const auto p4 = prepack(testutil::random_quantized(64, 128, 4, 32, gen), t);
  EXPECT_EQ(p1.payload_bytes() * 4, p4.payload_bytes());
  EXPECT_EQ(p4.payload_bytes(), 4u * 64u * 128u / 4u / 2u);  // bits x M x K/g slots, two per byte
}

TEST(Serialize, RoundTripRandom) {
  std::mt19937 gen(8);
  for (int trial = 0; trial < 20; ++trial) {
    const int bits = 1 + trial % 4;
    const TileConfig t{1 + static_cast<std::size_t>(trial % 3), 16u << (trial % 2), 32, 4, 16};
    const auto pw = prepack(testutil::random_quantized(64, 96, bits, 32, gen), t);
    EXPECT_EQ(deserialize(serialize(pw)), pw);
  }
}

TEST(Serialize, BadMagic) {
  std::mt19937 gen(9);
  auto bytes = serialize(prepack(testutil::random_quantized(16, 32, 2, 32, gen), TileConfig{1, 16, 32, 4, 16}));
  std::memcpy(bytes.data(), "XXXX", 4);
  EXPECT_THROW(deserialize(bytes), BadMagicError);
}

TEST(Serialize, VersionMismatch) {
  std::mt19937 gen(9);
  auto bytes = serialize(prepack(testutil::random_quantized(16, 32, 2, 32, gen), TileConfig{1, 16, 32, 4, 16}));
  bytes[4] = 99;
  EXPECT_THROW(deserialize(bytes), VersionMismatchError);
}

TEST(Serialize, Truncated) {
  std::mt19937 gen(9);
  auto bytes = serialize(prepack(testutil::random_quantized(16, 32, 2, 32, gen), TileConfig{1, 16, 32, 4, 16}));
  bytes.resize(bytes.size() - 3);
  EXPECT_THROW(deserialize(bytes), TruncatedError);
  bytes.resize(10);
  EXPECT_THROW(deserialize(bytes), TruncatedError);
}

TEST(Serialize, HeaderBitsDisagreeWithPayload) {
  std::mt19937 gen(9);
  auto bytes = serialize(prepack(testutil::random_quantized(16, 32, 2, 32, gen), TileConfig{1, 16, 32, 4, 16}));
  bytes[32] = 4;  // bits field
  EXPECT_THROW(deserialize(bytes), LengthMismatchError);
}

TEST(Serialize, TrailingBytes) {
  std::mt19937 gen(9);
  auto bytes = serialize(prepack(testutil::random_quantized(16, 32, 2, 32, gen), TileConfig{1, 16, 32, 4, 16}));
  bytes.push_back(0);
  EXPECT_THROW(deserialize(bytes), LengthMismatchError);
}
