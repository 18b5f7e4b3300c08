#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string_view>
#include <vector>

#include "bitlut/core.hpp"
#include "bitlut/lut_build.hpp"
#include "bitlut/weight_prep.hpp"

namespace bitlut {

enum class KernelVariant {
  scalar_real,             // float tables; the semantic reference for the rest
  scalar_quantized,        // int8 tables, one lookup at a time
  vector_quantized,        // int8 tables, 16 lookups per byte shuffle
  vector_fast_aggregation  // as vector_quantized, summing through a rounding-average tree
};

std::string_view to_string(KernelVariant v);
/// Accepts the CLI spellings: scalar-real, scalar-q8, vector-q8, fast-agg.
KernelVariant parse_variant(std::string_view name);

/// Instrumentation filled by the kernels when KernelOptions::stats is set.
struct KernelStats {
  std::uint64_t lut_builds = 0;  // (n_tile x k_tile) activation blocks turned into tables
  std::uint64_t lookups = 0;     // table reads, summed over all outputs
  std::size_t table_bytes = 0;   // consolidated table storage of the largest n block
  std::size_t table_bytes_unconsolidated = 0;
  bool track_per_output = false;
  std::vector<std::uint64_t> lookups_per_output;  // n x m, only when track_per_output
};

struct KernelOptions {
  int threads = 1;
  KernelStats* stats = nullptr;
  bool portable = false;  // run vector variants through the scalar integer path
};

/// Rejects configurations the kernel cannot run exactly: cfg/layout mismatch,
/// group size not a multiple of g, or integer staging that could overflow.
void check_kernel_config(const PackedWeights& pw, const TileConfig& cfg, KernelVariant variant);

std::vector<float> mpgemv(std::span<const float> a_row, const PackedWeights& pw, const TileConfig& cfg,
                          KernelVariant variant, const KernelOptions& opts = {});

Matrix mpgemm(const Matrix& a, const PackedWeights& pw, const TileConfig& cfg, KernelVariant variant,
              const KernelOptions& opts = {});

/// lanes output channels x kg_count k-groups of one packed plane.
struct PlaneTileView {
  const std::uint8_t* stripe = nullptr;  // start of the M-block stripe
  std::size_t first_unit = 0;            // interleave unit holding (chunk, first k-group)
  std::size_t kg_begin = 0;              // global k-group of the first unit
  std::size_t kg_count = 0;
  std::size_t lanes = 16;
  int g = 4;

  unsigned index(std::size_t lane, std::size_t j) const;
};

PlaneTileView plane_tile_view(const PackedWeights& pw, int plane, std::size_t m_block, std::size_t chunk,
                              std::size_t kg_begin, std::size_t kg_count);

/// acc[l] += sum_j lut.value(row, kg_begin + j, index(l, j)); real-mode tables.
void lookup_accumulate_tile(const PlaneTileView& tile, const LookupTables& lut, std::size_t row,
                            std::span<float> acc);

/// Signed rounding halving add, (a + b + 1) >> 1.
std::int8_t rounding_halving_add(std::int8_t a, std::int8_t b);

/// Expected upward drift of a rounding-average tree of the given depth, measured
/// after rescaling by 2^depth: depth * 2^(depth - 2).
double fast_aggregation_bias(int depth);

/// Root of the pairwise rounding-average tree over 2^depth values.
std::int8_t halving_tree(std::span<const std::int8_t> partials, int depth);

/// Approximate sum: 2^depth * halving_tree(partials) - fast_aggregation_bias(depth).
double fast_aggregate(std::span<const std::int8_t> partials, int depth);

}  // namespace bitlut
