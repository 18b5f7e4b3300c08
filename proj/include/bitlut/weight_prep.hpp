#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "bitlut/core.hpp"

namespace bitlut {

/// Bumped whenever the tile visit order or the byte interleave changes.
inline constexpr std::uint32_t kLayoutVersion = 1;

/// One bit position of every weight, grouped g at a time into lookup indices.
struct BitPlane {
  std::size_t m = 0;
  std::size_t k_groups = 0;
  int g = 4;
  std::vector<std::uint8_t> indices;  // m x k_groups, each < 2^g

  std::uint8_t at(std::size_t row, std::size_t kg) const { return indices[row * k_groups + kg]; }
  friend bool operator==(const BitPlane&, const BitPlane&) = default;
};

/// Kernel-side weight operand: per-bit byte buffers in tile-major, interleaved order.
struct PackedWeights {
  std::size_t m = 0;
  std::size_t k = 0;          // padded reduction length
  std::size_t k_logical = 0;  // activation length expected by the kernel
  int bits = 0;
  int g = 4;
  std::size_t group_size = 32;
  TileConfig tile;
  std::vector<std::vector<std::uint8_t>> planes;
  std::vector<float> scales;  // m x (k / group_size), same layout as QuantizedWeights
  std::uint32_t layout_version = kLayoutVersion;
  // Derived, not serialized: scales reordered per M-block as [group][m_local].
  std::vector<float> kernel_scales;

  std::size_t k_groups() const { return k / static_cast<std::size_t>(g); }
  std::size_t groups_per_row() const { return k / group_size; }
  std::size_t plane_bytes() const;
  std::size_t payload_bytes() const { return plane_bytes() * static_cast<std::size_t>(bits); }

  friend bool operator==(const PackedWeights&, const PackedWeights&) = default;
};

// Index slot geometry: g <= 2 uses 2-bit slots, g <= 4 nibbles, wider g one byte.
int slot_bits(int g);
inline std::size_t slots_per_byte(int g) { return 8 / static_cast<std::size_t>(slot_bits(g)); }

/// Bit offset inside a byte of the u-th lanes-wide unit of an interleaved block.
/// Nibble layout: unit 0 low nibble, unit 1 high nibble. Two-bit layout splits
/// each nibble again: units 0,1 take the low two bits of the low/high nibble,
/// units 2,3 the high two bits.
inline unsigned slot_shift(std::size_t unit, int g) {
  switch (slot_bits(g)) {
    case 4: return static_cast<unsigned>(unit) * 4u;
    case 2: return static_cast<unsigned>((unit & 1u) * 4u + (unit >> 1) * 2u);
    default: return 0u;
  }
}

/// Pads K to a multiple of `multiple` with qvalue = 2^(bits-1) (dequantizes to 0).
/// Whole padded groups receive scale 0.
QuantizedWeights pad_k(const QuantizedWeights& qw, std::size_t multiple);

std::vector<BitPlane> decompose_bits(const QuantizedWeights& qw, int g);

/// One index per input byte in, packed interleaved bytes out.
std::vector<std::uint8_t> interleave_layout(std::span<const std::uint8_t> indices, int g, std::size_t lanes);
std::vector<std::uint8_t> deinterleave_layout(std::span<const std::uint8_t> packed, int g, std::size_t lanes);

/// Permutes planes into the kernel's visit order and interleaves each M-block stripe.
/// The caller fills k_logical/group_size/scales (see prepack).
PackedWeights pack_and_permute(const std::vector<BitPlane>& planes, const TileConfig& tile);

/// Inverse of pack_and_permute.
std::vector<BitPlane> unpack_planes(const PackedWeights& pw);

/// Fills pw.kernel_scales from pw.scales.
void attach_kernel_scales(PackedWeights& pw);

/// Full offline pipeline: pad, decompose, permute, interleave, attach scales.
PackedWeights prepack(const QuantizedWeights& qw, const TileConfig& tile);

/// Reads one index of a packed plane, addressed by logical (row, k-group).
std::uint8_t packed_index(const PackedWeights& pw, int plane, std::size_t row, std::size_t kg);

std::vector<std::uint8_t> serialize(const PackedWeights& pw);
PackedWeights deserialize(std::span<const std::uint8_t> bytes);

}  // namespace bitlut
