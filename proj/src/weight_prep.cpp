#include "bitlut/weight_prep.hpp"

#include <bit>
#include <cstring>
#include <numeric>
#include <string>

#include "byte_stream.hpp"

namespace bitlut {

namespace {

std::string str(std::size_t v) { return std::to_string(v); }

void check_g(int g) {
  if (g < 1 || g > 8) throw ParameterError("g must be in [1,8], got " + std::to_string(g));
}

struct StripeGeometry {
  std::size_t chunks;           // m_tile / lanes
  std::size_t kg_per_tile;      // k_tile / g
  std::size_t units_per_tile;   // chunks * kg_per_tile
  std::size_t units;            // units per stripe
  std::size_t spb;              // slots per byte
  std::size_t stripe_bytes;

  StripeGeometry(const TileConfig& t, std::size_t k_groups) {
    chunks = t.m_tile / t.lanes;
    kg_per_tile = t.k_tile / static_cast<std::size_t>(t.g);
    units_per_tile = chunks * kg_per_tile;
    units = chunks * k_groups;
    spb = slots_per_byte(t.g);
    stripe_bytes = units / spb * t.lanes;
  }

  std::size_t unit_of(std::size_t m_local, std::size_t kg, std::size_t lanes) const {
    return (kg / kg_per_tile) * units_per_tile + (m_local / lanes) * kg_per_tile + kg % kg_per_tile;
  }
};

void check_packable(std::size_t m, std::size_t k_groups, const TileConfig& tile) {
  tile.validate();
  if (m % tile.m_tile != 0) {
    throw LayoutError("M=" + str(m) + " is not divisible by m_tile=" + str(tile.m_tile));
  }
  const std::size_t kgpt = tile.k_tile / static_cast<std::size_t>(tile.g);
  if (k_groups % kgpt != 0) {
    throw LayoutError("K/g=" + str(k_groups) + " is not divisible by k_tile/g=" + str(kgpt));
  }
  const std::size_t units = tile.m_tile / tile.lanes * k_groups;
  if (units % slots_per_byte(tile.g) != 0) {
    throw LayoutError("K: stripe of " + str(units) + " lane units does not fill whole " +
                      str(slots_per_byte(tile.g)) + "-slot interleave blocks");
  }
}

using detail::put_u32;
using detail::put_u64;
using detail::Reader;

constexpr char kMagic[4] = {'L', 'M', 'P', 'W'};

}  // namespace

int slot_bits(int g) {
  check_g(g);
  if (g <= 2) return 2;
  if (g <= 4) return 4;
  return 8;
}

std::size_t PackedWeights::plane_bytes() const {
  const std::size_t indices = m * k_groups();
  return indices / slots_per_byte(g);
}

QuantizedWeights pad_k(const QuantizedWeights& qw, std::size_t multiple) {
  qw.validate();
  if (multiple == 0) throw ParameterError("padding multiple must be positive");
  const std::size_t step = std::lcm(multiple, qw.group_size);
  const std::size_t k_new = (qw.k + step - 1) / step * step;
  if (k_new == qw.k) return qw;

  QuantizedWeights out;
  out.m = qw.m;
  out.k = k_new;
  out.bits = qw.bits;
  out.group_size = qw.group_size;
  out.qvalues.assign(out.m * out.k, static_cast<std::uint8_t>(qw.offset()));
  out.scales.assign(out.m * out.groups_per_row(), 0.0f);
  for (std::size_t r = 0; r < qw.m; ++r) {
    std::memcpy(&out.qvalues[r * out.k], &qw.qvalues[r * qw.k], qw.k);
    std::memcpy(&out.scales[r * out.groups_per_row()], &qw.scales[r * qw.groups_per_row()],
                qw.groups_per_row() * sizeof(float));
  }
  return out;
}

std::vector<BitPlane> decompose_bits(const QuantizedWeights& qw, int g) {
  check_g(g);
  qw.validate();
  const auto ug = static_cast<std::size_t>(g);
  if (qw.k % ug != 0) {
    throw LayoutError("K=" + str(qw.k) + " is not divisible by g=" + std::to_string(g) + "; pad K first");
  }
  std::vector<BitPlane> planes(static_cast<std::size_t>(qw.bits));
  for (int i = 0; i < qw.bits; ++i) {
    auto& p = planes[static_cast<std::size_t>(i)];
    p.m = qw.m;
    p.k_groups = qw.k / ug;
    p.g = g;
    p.indices.assign(p.m * p.k_groups, 0);
    for (std::size_t r = 0; r < qw.m; ++r) {
      for (std::size_t c = 0; c < qw.k; ++c) {
        const unsigned bit = (qw.q(r, c) >> i) & 1u;
        p.indices[r * p.k_groups + c / ug] |= static_cast<std::uint8_t>(bit << (c % ug));
      }
    }
  }
  return planes;
}

std::vector<std::uint8_t> interleave_layout(std::span<const std::uint8_t> indices, int g, std::size_t lanes) {
  const std::size_t spb = slots_per_byte(g);
  if (lanes == 0 || indices.size() % (lanes * spb) != 0) {
    throw LayoutError("interleave span of " + str(indices.size()) + " indices is not a multiple of " +
                      str(lanes * spb));
  }
  const unsigned mask = (1u << g) - 1u;
  std::vector<std::uint8_t> out(indices.size() / spb, 0);
  for (std::size_t block = 0; block < out.size() / lanes; ++block) {
    for (std::size_t u = 0; u < spb; ++u) {
      const unsigned shift = slot_shift(u, g);
      for (std::size_t l = 0; l < lanes; ++l) {
        const unsigned idx = indices[(block * spb + u) * lanes + l] & mask;
        out[block * lanes + l] |= static_cast<std::uint8_t>(idx << shift);
      }
    }
  }
  return out;
}

std::vector<std::uint8_t> deinterleave_layout(std::span<const std::uint8_t> packed, int g, std::size_t lanes) {
  const std::size_t spb = slots_per_byte(g);
  if (lanes == 0 || packed.size() % lanes != 0) {
    throw LayoutError("packed span of " + str(packed.size()) + " bytes is not a multiple of lanes=" + str(lanes));
  }
  const unsigned mask = slot_bits(g) == 8 ? 0xFFu : (1u << slot_bits(g)) - 1u;
  std::vector<std::uint8_t> out(packed.size() * spb);
  for (std::size_t block = 0; block < packed.size() / lanes; ++block) {
    for (std::size_t u = 0; u < spb; ++u) {
      const unsigned shift = slot_shift(u, g);
      for (std::size_t l = 0; l < lanes; ++l) {
        out[(block * spb + u) * lanes + l] = static_cast<std::uint8_t>((packed[block * lanes + l] >> shift) & mask);
      }
    }
  }
  return out;
}

PackedWeights pack_and_permute(const std::vector<BitPlane>& planes, const TileConfig& tile) {
  if (planes.empty()) throw ParameterError("no bit planes to pack");
  const auto& first = planes.front();
  if (first.g != tile.g) {
    throw ParameterError("plane g=" + std::to_string(first.g) + " does not match tile g=" + std::to_string(tile.g));
  }
  for (const auto& p : planes) {
    if (p.m != first.m || p.k_groups != first.k_groups || p.g != first.g) {
      throw ShapeError("bit planes disagree on shape");
    }
  }
  check_packable(first.m, first.k_groups, tile);

  PackedWeights pw;
  pw.m = first.m;
  pw.g = tile.g;
  pw.k = first.k_groups * static_cast<std::size_t>(tile.g);
  pw.k_logical = pw.k;
  pw.bits = static_cast<int>(planes.size());
  pw.tile = tile;

  const StripeGeometry geo(tile, first.k_groups);
  std::vector<std::uint8_t> stripe(geo.units * tile.lanes);
  for (const auto& plane : planes) {
    std::vector<std::uint8_t> buf;
    buf.reserve(pw.plane_bytes());
    for (std::size_t mb = 0; mb < pw.m / tile.m_tile; ++mb) {
      // Tile visit order: K tiles, then lane chunks, then k-groups, then lanes.
      std::size_t pos = 0;
      for (std::size_t kt = 0; kt < first.k_groups / geo.kg_per_tile; ++kt) {
        for (std::size_t c = 0; c < geo.chunks; ++c) {
          for (std::size_t kgl = 0; kgl < geo.kg_per_tile; ++kgl) {
            for (std::size_t l = 0; l < tile.lanes; ++l) {
              const std::size_t row = mb * tile.m_tile + c * tile.lanes + l;
              stripe[pos++] = plane.at(row, kt * geo.kg_per_tile + kgl);
            }
          }
        }
      }
      auto packed = interleave_layout(stripe, tile.g, tile.lanes);
      buf.insert(buf.end(), packed.begin(), packed.end());
    }
    pw.planes.push_back(std::move(buf));
  }
  return pw;
}

std::uint8_t packed_index(const PackedWeights& pw, int plane, std::size_t row, std::size_t kg) {
  const auto& t = pw.tile;
  const StripeGeometry geo(t, pw.k_groups());
  const std::size_t mb = row / t.m_tile;
  const std::size_t u = geo.unit_of(row % t.m_tile, kg, t.lanes);
  const std::size_t byte = mb * geo.stripe_bytes + (u / geo.spb) * t.lanes + row % t.lanes;
  const unsigned mask = (1u << pw.g) - 1u;
  return static_cast<std::uint8_t>((pw.planes[static_cast<std::size_t>(plane)][byte] >> slot_shift(u % geo.spb, pw.g)) & mask);
}

std::vector<BitPlane> unpack_planes(const PackedWeights& pw) {
  std::vector<BitPlane> planes(static_cast<std::size_t>(pw.bits));
  const StripeGeometry geo(pw.tile, pw.k_groups());
  for (int i = 0; i < pw.bits; ++i) {
    auto& p = planes[static_cast<std::size_t>(i)];
    p.m = pw.m;
    p.k_groups = pw.k_groups();
    p.g = pw.g;
    p.indices.assign(p.m * p.k_groups, 0);
    const auto& buf = pw.planes[static_cast<std::size_t>(i)];
    for (std::size_t mb = 0; mb < pw.m / pw.tile.m_tile; ++mb) {
      auto stripe = deinterleave_layout(
          std::span(buf).subspan(mb * geo.stripe_bytes, geo.stripe_bytes), pw.g, pw.tile.lanes);
      for (std::size_t ml = 0; ml < pw.tile.m_tile; ++ml) {
        for (std::size_t kg = 0; kg < p.k_groups; ++kg) {
          const std::size_t u = geo.unit_of(ml, kg, pw.tile.lanes);
          p.indices[(mb * pw.tile.m_tile + ml) * p.k_groups + kg] = stripe[u * pw.tile.lanes + ml % pw.tile.lanes];
        }
      }
    }
  }
  return planes;
}

void attach_kernel_scales(PackedWeights& pw) {
  const std::size_t groups = pw.groups_per_row();
  const std::size_t mt = pw.tile.m_tile;
  pw.kernel_scales.resize(pw.scales.size());
  for (std::size_t r = 0; r < pw.m; ++r) {
    const std::size_t mb = r / mt;
    for (std::size_t gq = 0; gq < groups; ++gq) {
      pw.kernel_scales[(mb * groups + gq) * mt + r % mt] = pw.scales[r * groups + gq];
    }
  }
}

PackedWeights prepack(const QuantizedWeights& qw, const TileConfig& tile) {
  tile.validate();
  const auto padded = pad_k(qw, tile.k_tile);
  auto pw = pack_and_permute(decompose_bits(padded, tile.g), tile);
  pw.k_logical = qw.k;
  pw.group_size = padded.group_size;
  pw.scales = padded.scales;
  attach_kernel_scales(pw);
  return pw;
}

std::vector<std::uint8_t> serialize(const PackedWeights& pw) {
  std::vector<std::uint8_t> out;
  out.reserve(96 + pw.scales.size() * 4 + pw.payload_bytes());
  out.insert(out.end(), std::begin(kMagic), std::end(kMagic));
  put_u32(out, pw.layout_version);
  put_u64(out, pw.m);
  put_u64(out, pw.k);
  put_u64(out, pw.k_logical);
  put_u32(out, static_cast<std::uint32_t>(pw.bits));
  put_u32(out, static_cast<std::uint32_t>(pw.g));
  put_u64(out, pw.group_size);
  put_u64(out, pw.tile.n_tile);
  put_u64(out, pw.tile.m_tile);
  put_u64(out, pw.tile.k_tile);
  put_u64(out, pw.tile.lanes);
  std::size_t payload = 0;
  for (const auto& p : pw.planes) payload += p.size();
  put_u64(out, payload);
  for (float s : pw.scales) detail::put_f32(out, s);
  for (const auto& p : pw.planes) out.insert(out.end(), p.begin(), p.end());
  return out;
}

PackedWeights deserialize(std::span<const std::uint8_t> bytes) {
  Reader rd(bytes, "LMPW");
  auto magic = rd.raw(4);
  if (std::memcmp(magic.data(), kMagic, 4) != 0) throw BadMagicError("not an LMPW stream (bad magic)");
  PackedWeights pw;
  pw.layout_version = rd.u32();
  if (pw.layout_version != kLayoutVersion) {
    throw VersionMismatchError("LMPW layout version " + std::to_string(pw.layout_version) +
                               " is not supported (expected " + std::to_string(kLayoutVersion) + ")");
  }
  pw.m = rd.u64();
  pw.k = rd.u64();
  pw.k_logical = rd.u64();
  pw.bits = static_cast<int>(rd.u32());
  pw.g = static_cast<int>(rd.u32());
  pw.group_size = rd.u64();
  pw.tile.n_tile = rd.u64();
  pw.tile.m_tile = rd.u64();
  pw.tile.k_tile = rd.u64();
  pw.tile.lanes = rd.u64();
  pw.tile.g = pw.g;
  const std::uint64_t payload = rd.u64();

  if (pw.bits < 1 || pw.bits > 4) throw ParameterError("LMPW header: bits out of range");
  check_g(pw.g);
  if (pw.group_size == 0 || pw.k % pw.group_size != 0 || pw.k_logical > pw.k) {
    throw ParameterError("LMPW header: inconsistent k/group_size");
  }
  check_packable(pw.m, pw.k_groups(), pw.tile);
  if (payload != pw.payload_bytes()) {
    throw LengthMismatchError("LMPW header declares " + str(payload) + " payload bytes but m/k/bits/g imply " +
                              str(pw.payload_bytes()));
  }

  pw.scales = rd.f32s(pw.m * pw.groups_per_row());
  for (int i = 0; i < pw.bits; ++i) {
    auto p = rd.raw(pw.plane_bytes());
    pw.planes.emplace_back(p.begin(), p.end());
  }
  if (rd.remaining() != 0) {
    throw LengthMismatchError("LMPW stream has " + str(rd.remaining()) + " trailing bytes after the payload");
  }
  attach_kernel_scales(pw);
  return pw;
}

}  // namespace bitlut
