#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "bitlut/errors.hpp"

namespace bitlut {

/// Row-major real matrix with an explicit row stride.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols);
  Matrix(std::size_t rows, std::size_t cols, std::vector<float> data);
  Matrix(std::size_t rows, std::size_t cols, std::size_t stride, std::vector<float> data);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t stride() const { return stride_; }

  float operator()(std::size_t r, std::size_t c) const { return data_[r * stride_ + c]; }
  float& operator()(std::size_t r, std::size_t c) { return data_[r * stride_ + c]; }

  std::span<const float> row(std::size_t r) const { return {data_.data() + r * stride_, cols_}; }
  std::span<float> row(std::size_t r) { return {data_.data() + r * stride_, cols_}; }

  const std::vector<float>& data() const { return data_; }

  /// Throws InputError if any logical element is NaN or infinite.
  void require_finite(const char* what) const;

  friend bool operator==(const Matrix& a, const Matrix& b);

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::size_t stride_ = 0;
  std::vector<float> data_;
};

void require_finite(std::span<const float> values, const char* what);

/// Integer weights with per-group scales along K. The zero point is implicit:
/// value = scale * (q - 2^(bits-1)).
struct QuantizedWeights {
  std::size_t m = 0;
  std::size_t k = 0;
  int bits = 4;
  std::size_t group_size = 32;
  std::vector<std::uint8_t> qvalues;  // m x k
  std::vector<float> scales;          // m x (k / group_size)

  std::size_t groups_per_row() const { return group_size == 0 ? 0 : k / group_size; }
  int offset() const { return 1 << (bits - 1); }
  std::uint8_t q(std::size_t row, std::size_t col) const { return qvalues[row * k + col]; }
  float scale(std::size_t row, std::size_t col) const {
    return scales[row * groups_per_row() + col / group_size];
  }

  void validate() const;
  friend bool operator==(const QuantizedWeights&, const QuantizedWeights&) = default;
};

/// Round-to-nearest group quantization. The per-group scale is refined by a
/// short least-squares search seeded at (signed max) / -2^(bits-1).
QuantizedWeights quantize_rtn(const Matrix& w, int bits, std::size_t group_size = 32);

Matrix dequantize(const QuantizedWeights& qw);

/// Constants of the {0,1} -> {s0,s1} remap used to turn each bit plane into a
/// signed plane: v = alpha * f(v) + beta for every bit.
struct BitSerialParams {
  static constexpr float s0 = -1.0f;
  static constexpr float s1 = 1.0f;

  int bits = 0;
  std::vector<float> alpha;
  std::vector<float> beta;
  float combined_bias = 0.0f;  // sum_i beta_i * 2^i

  static float transform(int v) { return s0 + (s1 - s0) * static_cast<float>(v); }
  /// sum_i alpha_i * 2^i * f(bit_i(v)) + combined_bias
  float reconstruct(unsigned v) const;
};

BitSerialParams bit_serial_params(int bits);

/// Loop-nest and tiling parameters; also the tuner's search point.
struct TileConfig {
  std::size_t n_tile = 1;
  std::size_t m_tile = 64;
  std::size_t k_tile = 128;
  int g = 4;
  std::size_t lanes = 16;

  /// Throws ParameterError naming the first violated invariant.
  void validate() const;
  bool valid() const noexcept;

  /// Table entries for one n_tile x k_tile activation block after mirror consolidation.
  std::size_t lut_entries() const { return n_tile * (k_tile / g) * (std::size_t{1} << (g - 1)); }

  friend bool operator==(const TileConfig&, const TileConfig&) = default;
};

TileConfig default_tile_config(std::size_t m, std::size_t k, int g = 4);

}  // namespace bitlut
