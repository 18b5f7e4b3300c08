#pragma once

// Little-endian stream helpers shared by the binary file formats.

#include <bit>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "bitlut/errors.hpp"

namespace bitlut::detail {

inline void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline void put_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}
inline void put_f32(std::vector<std::uint8_t>& out, float v) { put_u32(out, std::bit_cast<std::uint32_t>(v)); }

class Reader {
 public:
  Reader(std::span<const std::uint8_t> bytes, const char* format) : bytes_(bytes), format_(format) {}
  std::size_t remaining() const { return bytes_.size() - pos_; }
  std::uint32_t u32() { return static_cast<std::uint32_t>(take(4)); }
  std::uint64_t u64() { return take(8); }
  float f32() { return std::bit_cast<float>(u32()); }
  std::span<const std::uint8_t> raw(std::size_t n) {
    need(n);
    auto s = bytes_.subspan(pos_, n);
    pos_ += n;
    return s;
  }
  std::vector<float> f32s(std::size_t n) {
    auto b = raw(n * 4);
    std::vector<float> v(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t u = 0;
      for (int j = 0; j < 4; ++j) u |= static_cast<std::uint32_t>(b[i * 4 + j]) << (8 * j);
      v[i] = std::bit_cast<float>(u);
    }
    return v;
  }

 private:
  void need(std::size_t n) const {
    if (remaining() < n) throw TruncatedError(std::string(format_) + " stream truncated at byte " + std::to_string(pos_));
  }
  std::uint64_t take(int n) {
    need(static_cast<std::size_t>(n));
    std::uint64_t v = 0;
    for (int i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
    pos_ += static_cast<std::size_t>(n);
    return v;
  }
  std::span<const std::uint8_t> bytes_;
  const char* format_;
  std::size_t pos_ = 0;
};

}  // namespace bitlut::detail
