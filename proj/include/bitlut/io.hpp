#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "bitlut/core.hpp"

// File formats other than LMPW (which lives with weight_prep). Byte layouts are in docs/formats.md.
namespace bitlut {

inline constexpr std::uint32_t kRawMatrixVersion = 1;
inline constexpr std::uint32_t kQuantizedVersion = 1;

std::vector<std::uint8_t> encode_matrix(const Matrix& m);
Matrix decode_matrix(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> encode_quantized(const QuantizedWeights& qw);
QuantizedWeights decode_quantized(std::span<const std::uint8_t> bytes);

std::vector<std::uint8_t> read_file(const std::string& path);
/// Writes to a sibling temporary file, then renames over `path`.
void write_file_atomic(const std::string& path, std::span<const std::uint8_t> bytes);

}  // namespace bitlut
