#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "bitlut/core.hpp"
#include "bitlut/weight_prep.hpp"

// Test-side reference implementations. Nothing here calls into the kernel,
// lut_build or the packing code.
namespace bitlut::oracle {

/// Dequantize, then a plain triple loop with k ascending. Sums in double.
Matrix reference_mpgemm(const Matrix& a, const QuantizedWeights& qw);

/// Same product with the loops ordered k outermost; cross-check for reference_mpgemm.
Matrix reference_mpgemm_kouter(const Matrix& a, const QuantizedWeights& qw);

/// Literal table evaluation: one full 2^g table per k-group, every bit plane looked up
/// on its own, partials combined per quantization group as
///   scale * (sum_i 2^(i-1) * P_i - rowsum / 2).
/// `scales` is m x (k / group_size). No tiling, packing or consolidation.
std::vector<double> reference_lut_mpgemv(std::span<const float> a_row, const std::vector<BitPlane>& planes,
                                         const BitSerialParams& params, std::span<const float> scales,
                                         std::size_t group_size);

}  // namespace bitlut::oracle
