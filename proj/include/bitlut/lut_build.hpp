#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "bitlut/core.hpp"

namespace bitlut {

/// Unconsolidated tables for one activation row: 2^g signed sums per k-group.
struct FullTables {
  std::size_t k_groups = 0;
  int g = 4;
  std::vector<float> entries;  // k_groups x 2^g

  std::size_t width() const { return std::size_t{1} << g; }
  float at(std::size_t kg, unsigned idx) const { return entries[kg * width() + idx]; }
  friend bool operator==(const FullTables&, const FullTables&) = default;
};

enum class TableMode { real, quantized8 };

/// Mirror-consolidated tables: only indices with the top bit clear are stored.
/// For idx >= 2^(g-1) the value is -stored[(2^g - 1) ^ idx].
struct LookupTables {
  std::size_t n = 0;
  std::size_t k_groups = 0;
  int g = 4;
  TableMode mode = TableMode::real;
  std::size_t tables_per_scale = 1;  // consecutive k-groups sharing one int8 scale
  std::vector<float> entries;        // real mode: n x k_groups x 2^(g-1)
  std::vector<std::int8_t> qentries; // quantized8 mode: same shape
  std::vector<float> table_scales;   // quantized8 mode: n x (k_groups / tables_per_scale)

  std::size_t half() const { return std::size_t{1} << (g - 1); }
  std::size_t scale_groups() const { return k_groups / tables_per_scale; }
  std::size_t offset(std::size_t row, std::size_t kg) const { return (row * k_groups + kg) * half(); }

  float table_scale(std::size_t row, std::size_t kg) const {
    return table_scales[row * scale_groups() + kg / tables_per_scale];
  }
  /// Real-valued lookup (dequantized in quantized8 mode), mirror reconstruction applied.
  float value(std::size_t row, std::size_t kg, unsigned idx) const;
  /// Integer lookup in quantized8 mode, mirror reconstruction applied.
  int qvalue(std::size_t row, std::size_t kg, unsigned idx) const;

  /// Bytes actually held by the table storage of the active mode.
  std::size_t allocated_bytes() const;
  /// Bytes the same tables would need without mirror consolidation.
  static std::size_t unconsolidated_bytes(std::size_t n, std::size_t k_groups, int g, TableMode mode);
};

struct RowSums {
  std::size_t n = 0;
  std::size_t groups = 0;
  std::vector<float> sums;  // n x groups

  float at(std::size_t row, std::size_t group) const { return sums[row * groups + group]; }
};

/// Full 2^g tables, entry(kg, idx) = sum_j (bit j of idx ? +1 : -1) * a[kg*g + j], j ascending.
FullTables precompute_lut(std::span<const float> a_row, int g);

/// Writes the 2^(g-1) stored entries of one k-group by doubling: tables over the
/// first g-1 activations are extended with -a[g-1]. Bit-identical to the top-bit-clear
/// half of precompute_lut.
void build_half_table(std::span<const float> group, std::span<float> out);

/// build_half_table over every k-group of a row; out holds (row.size() / g) * 2^(g-1) entries.
void build_half_tables(std::span<const float> row, int g, std::span<float> out);

/// Consolidated real tables for rows of `a` (all of K).
LookupTables build_tables(const Matrix& a, int g);

LookupTables mirror_consolidate(const FullTables& full);
FullTables reconstruct_full(const LookupTables& lut, std::size_t row = 0);

/// Symmetric int8 quantization with a dynamic scale per (row, tables_per_scale k-groups):
/// scale = max|entry| / 127 (1 when all zero), q = round-half-away(entry / scale).
LookupTables quantize_tables(const LookupTables& lut, std::size_t tables_per_scale = 1);

RowSums row_sums(const Matrix& a, std::size_t group_size);

}  // namespace bitlut
