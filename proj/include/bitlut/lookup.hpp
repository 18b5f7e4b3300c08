#pragma once

#include <cstdint>
#include <span>

namespace bitlut {

// Byte-parallel table lookup: out[j] = table[indices[j]] for a 16-entry byte table.
// Indices must be < 16. Maps to PSHUFB / TBL where available.
void lookup_bytes(std::span<const std::uint8_t, 16> table, std::span<const std::uint8_t> indices,
                  std::span<std::uint8_t> out);
void lookup_bytes_scalar(std::span<const std::uint8_t, 16> table, std::span<const std::uint8_t> indices,
                         std::span<std::uint8_t> out);

// Wide-table lookup for 16-bit entries: the table is split into a low-byte and a
// high-byte table, each looked up with the byte primitive, and the halves recombined.
void lookup_wide(std::span<const std::int16_t, 16> table, std::span<const std::uint8_t> indices,
                 std::span<std::int16_t> out);

bool has_byte_shuffle() noexcept;

}  // namespace bitlut
