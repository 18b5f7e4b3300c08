#include "bitlut/lookup.hpp"

#include <algorithm>
#include <array>
#include <cstring>

#include "bitlut/errors.hpp"

#if defined(__SSSE3__)
#include <immintrin.h>
#endif

namespace bitlut {

bool has_byte_shuffle() noexcept {
#if defined(__SSSE3__)
  return true;
#else
  return false;
#endif
}

void lookup_bytes_scalar(std::span<const std::uint8_t, 16> table, std::span<const std::uint8_t> indices,
                         std::span<std::uint8_t> out) {
  if (out.size() < indices.size()) throw ShapeError("lookup output shorter than indices");
  for (std::size_t j = 0; j < indices.size(); ++j) out[j] = table[indices[j] & 0x0F];
}

void lookup_bytes(std::span<const std::uint8_t, 16> table, std::span<const std::uint8_t> indices,
                  std::span<std::uint8_t> out) {
  if (out.size() < indices.size()) throw ShapeError("lookup output shorter than indices");
  std::size_t j = 0;
#if defined(__SSSE3__)
  const __m128i tbl = _mm_loadu_si128(reinterpret_cast<const __m128i*>(table.data()));
  const __m128i low4 = _mm_set1_epi8(0x0F);
  for (; j + 16 <= indices.size(); j += 16) {
    __m128i idx = _mm_loadu_si128(reinterpret_cast<const __m128i*>(indices.data() + j));
    idx = _mm_and_si128(idx, low4);
    _mm_storeu_si128(reinterpret_cast<__m128i*>(out.data() + j), _mm_shuffle_epi8(tbl, idx));
  }
#endif
  lookup_bytes_scalar(table, indices.subspan(j), out.subspan(j));
}

void lookup_wide(std::span<const std::int16_t, 16> table, std::span<const std::uint8_t> indices,
                 std::span<std::int16_t> out) {
  if (out.size() < indices.size()) throw ShapeError("lookup output shorter than indices");
  std::array<std::uint8_t, 16> lo{}, hi{};
  for (std::size_t i = 0; i < 16; ++i) {
    const auto u = static_cast<std::uint16_t>(table[i]);
    lo[i] = static_cast<std::uint8_t>(u & 0xFF);
    hi[i] = static_cast<std::uint8_t>(u >> 8);
  }
  constexpr std::size_t kChunk = 256;
  std::array<std::uint8_t, kChunk> lo_out{}, hi_out{};
  for (std::size_t base = 0; base < indices.size(); base += kChunk) {
    const std::size_t n = std::min(kChunk, indices.size() - base);
    lookup_bytes(lo, indices.subspan(base, n), std::span(lo_out).first(n));
    lookup_bytes(hi, indices.subspan(base, n), std::span(hi_out).first(n));
    for (std::size_t j = 0; j < n; ++j) {
      out[base + j] = static_cast<std::int16_t>(static_cast<std::uint16_t>(lo_out[j] | (hi_out[j] << 8)));
    }
  }
}

}  // namespace bitlut
