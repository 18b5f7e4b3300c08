#include "bitlut/oracle.hpp"

#include <string>

namespace bitlut::oracle {

namespace {

double weight(const QuantizedWeights& qw, std::size_t m, std::size_t k) {
  const int centered = static_cast<int>(qw.q(m, k)) - (1 << (qw.bits - 1));
  return static_cast<double>(qw.scale(m, k)) * centered;
}

void check_shapes(const Matrix& a, const QuantizedWeights& qw) {
  if (a.cols() != qw.k) {
    throw ShapeError("activation has " + std::to_string(a.cols()) + " columns, weights have k=" + std::to_string(qw.k));
  }
  qw.validate();
}

}  // namespace

Matrix reference_mpgemm(const Matrix& a, const QuantizedWeights& qw) {
  check_shapes(a, qw);
  Matrix out(a.rows(), qw.m);
  for (std::size_t n = 0; n < a.rows(); ++n) {
    for (std::size_t m = 0; m < qw.m; ++m) {
      double s = 0.0;
      for (std::size_t k = 0; k < qw.k; ++k) s += static_cast<double>(a(n, k)) * weight(qw, m, k);
      out(n, m) = static_cast<float>(s);
    }
  }
  return out;
}

Matrix reference_mpgemm_kouter(const Matrix& a, const QuantizedWeights& qw) {
  check_shapes(a, qw);
  std::vector<double> acc(a.rows() * qw.m, 0.0);
  for (std::size_t k = 0; k < qw.k; ++k) {
    for (std::size_t n = 0; n < a.rows(); ++n) {
      const double x = a(n, k);
      for (std::size_t m = 0; m < qw.m; ++m) acc[n * qw.m + m] += x * weight(qw, m, k);
    }
  }
  Matrix out(a.rows(), qw.m);
  for (std::size_t n = 0; n < a.rows(); ++n) {
    for (std::size_t m = 0; m < qw.m; ++m) out(n, m) = static_cast<float>(acc[n * qw.m + m]);
  }
  return out;
}

std::vector<double> reference_lut_mpgemv(std::span<const float> a_row, const std::vector<BitPlane>& planes,
                                         const BitSerialParams& params, std::span<const float> scales,
                                         std::size_t group_size) {
  if (planes.empty() || static_cast<int>(planes.size()) != params.bits) {
    throw ShapeError("plane count does not match bits");
  }
  const std::size_t m = planes[0].m;
  const std::size_t kgs = planes[0].k_groups;
  const int g = planes[0].g;
  const std::size_t k = kgs * static_cast<std::size_t>(g);
  if (a_row.size() != k) throw ShapeError("activation length does not match planes");
  if (group_size == 0 || k % group_size != 0 || group_size % static_cast<std::size_t>(g) != 0) {
    throw ShapeError("group_size must divide K and be a multiple of g");
  }
  const std::size_t groups = k / group_size;
  if (scales.size() != m * groups) throw ShapeError("scale count does not match planes");

  // Every sign pattern summed directly.
  const std::size_t width = std::size_t{1} << g;
  std::vector<double> table(kgs * width);
  for (std::size_t kg = 0; kg < kgs; ++kg) {
    for (std::size_t idx = 0; idx < width; ++idx) {
      double s = 0.0;
      for (int j = 0; j < g; ++j) {
        const double sign = ((idx >> j) & 1u) ? BitSerialParams::s1 : BitSerialParams::s0;
        s += sign * a_row[kg * static_cast<std::size_t>(g) + static_cast<std::size_t>(j)];
      }
      table[kg * width + idx] = s;
    }
  }

  std::vector<double> rowsum(groups, 0.0);
  for (std::size_t c = 0; c < k; ++c) rowsum[c / group_size] += a_row[c];

  // alpha_i * 2^i weights each plane; the remaining constant per element is
  // combined_bias - 2^(bits-1).
  const double bias = static_cast<double>(params.combined_bias) - static_cast<double>(1 << (params.bits - 1));
  const std::size_t kg_per_group = group_size / static_cast<std::size_t>(g);
  std::vector<double> out(m, 0.0);
  for (std::size_t row = 0; row < m; ++row) {
    double r = 0.0;
    for (std::size_t gq = 0; gq < groups; ++gq) {
      double combined = 0.0;
      for (int i = 0; i < params.bits; ++i) {
        double p = 0.0;
        for (std::size_t kg = gq * kg_per_group; kg < (gq + 1) * kg_per_group; ++kg) {
          p += table[kg * width + planes[static_cast<std::size_t>(i)].at(row, kg)];
        }
        combined += static_cast<double>(params.alpha[static_cast<std::size_t>(i)]) * static_cast<double>(1 << i) * p;
      }
      r += static_cast<double>(scales[row * groups + gq]) * (combined + bias * rowsum[gq]);
    }
    out[row] = r;
  }
  return out;
}

}  // namespace bitlut::oracle
