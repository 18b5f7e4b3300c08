#include "bitlut/core.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace bitlut {

Matrix::Matrix(std::size_t rows, std::size_t cols)
    : rows_(rows), cols_(cols), stride_(cols), data_(rows * cols, 0.0f) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<float> data)
    : Matrix(rows, cols, cols, std::move(data)) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::size_t stride, std::vector<float> data)
    : rows_(rows), cols_(cols), stride_(stride), data_(std::move(data)) {
  if (stride_ < cols_) {
    throw ShapeError("matrix stride " + std::to_string(stride_) + " is smaller than cols " +
                     std::to_string(cols_));
  }
  if (data_.size() != rows_ * stride_) {
    throw ShapeError("matrix data length " + std::to_string(data_.size()) + " != rows*stride " +
                     std::to_string(rows_ * stride_));
  }
  require_finite("matrix");
}

void Matrix::require_finite(const char* what) const {
  for (std::size_t r = 0; r < rows_; ++r) bitlut::require_finite(row(r), what);
}

bool operator==(const Matrix& a, const Matrix& b) {
  if (a.rows_ != b.rows_ || a.cols_ != b.cols_) return false;
  for (std::size_t r = 0; r < a.rows_; ++r) {
    if (!std::equal(a.row(r).begin(), a.row(r).end(), b.row(r).begin())) return false;
  }
  return true;
}

void require_finite(std::span<const float> values, const char* what) {
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (!std::isfinite(values[i])) {
      throw InputError(std::string(what) + ": non-finite value at index " + std::to_string(i));
    }
  }
}

void QuantizedWeights::validate() const {
  if (bits < 1 || bits > 4) throw ParameterError("bits must be in [1,4], got " + std::to_string(bits));
  if (group_size == 0 || k % group_size != 0) {
    throw ShapeError("k=" + std::to_string(k) + " is not divisible by group_size=" +
                     std::to_string(group_size));
  }
  if (qvalues.size() != m * k) throw ShapeError("qvalues length does not match m*k");
  if (scales.size() != m * groups_per_row()) throw ShapeError("scales length does not match m*k/group_size");
  const unsigned limit = 1u << bits;
  for (auto q : qvalues) {
    if (q >= limit) throw InputError("qvalue " + std::to_string(q) + " out of range for " + std::to_string(bits) + " bits");
  }
  bitlut::require_finite(scales, "scales");
}

namespace {

// Squared error of quantizing `x` with scale `d`; writes the chosen levels to `levels`.
double group_error(std::span<const float> x, float d, int lo, int hi, std::span<int> levels) {
  double err = 0.0;
  const float inv = 1.0f / d;
  for (std::size_t j = 0; j < x.size(); ++j) {
    // Round half away from zero, clamp, then convert; avoids a libm call per element.
    const float t = x[j] * inv;
    const float r = std::trunc(t);
    const float q = r + std::copysign(std::fabs(t - r) >= 0.5f ? 1.0f : 0.0f, t);
    const int l = static_cast<int>(std::clamp(q, static_cast<float>(lo), static_cast<float>(hi)));
    levels[j] = l;
    const double e = static_cast<double>(x[j]) - static_cast<double>(d) * l;
    err += e * e;
  }
  return err;
}

}  // namespace

QuantizedWeights quantize_rtn(const Matrix& w, int bits, std::size_t group_size) {
  if (bits < 1 || bits > 4) throw ParameterError("bits must be in [1,4], got " + std::to_string(bits));
  if (group_size == 0 || w.cols() % group_size != 0) {
    throw ShapeError("cols=" + std::to_string(w.cols()) + " is not divisible by group_size=" +
                     std::to_string(group_size));
  }
  w.require_finite("weights");

  QuantizedWeights qw;
  qw.m = w.rows();
  qw.k = w.cols();
  qw.bits = bits;
  qw.group_size = group_size;
  qw.qvalues.resize(qw.m * qw.k);
  qw.scales.resize(qw.m * qw.groups_per_row());

  const int offset = qw.offset();
  const int lo = -offset;
  const int hi = offset - 1;
  std::vector<int> levels(group_size), trial(group_size);

  for (std::size_t r = 0; r < qw.m; ++r) {
    for (std::size_t gi = 0; gi < qw.groups_per_row(); ++gi) {
      auto x = w.row(r).subspan(gi * group_size, group_size);
      float peak = 0.0f;
      for (float v : x) {
        if (std::fabs(v) > std::fabs(peak)) peak = v;
      }
      float best_d = 0.0f;
      std::fill(levels.begin(), levels.end(), 0);
      if (peak != 0.0f) {
        // Seed: the largest-magnitude value lands exactly on the most negative level.
        best_d = peak / static_cast<float>(lo);
        double best_err = group_error(x, best_d, lo, hi, levels);
        auto consider = [&](float d) {
          double err = group_error(x, d, lo, hi, trial);
          if (err < best_err) {
            best_err = err;
            best_d = d;
            levels = trial;
          }
          // Least-squares refit of the scale for the levels just chosen.
          double num = 0.0, den = 0.0;
          for (std::size_t j = 0; j < group_size; ++j) {
            num += static_cast<double>(x[j]) * trial[j];
            den += static_cast<double>(trial[j]) * trial[j];
          }
          if (den > 0.0 && num != 0.0) {
            const auto refit = static_cast<float>(num / den);
            err = group_error(x, refit, lo, hi, trial);
            if (err < best_err) {
              best_err = err;
              best_d = refit;
              levels = trial;
            }
          }
        };
        // Peak mapped near the negative end of the grid, step shrunk or stretched a little.
        for (int step = -6; step <= 2 && best_err > 0.0; ++step) {
          consider(peak / (static_cast<float>(lo) * (1.0f + static_cast<float>(step) / 16.0f)));
        }
      }
      qw.scales[r * qw.groups_per_row() + gi] = best_d;
      for (std::size_t j = 0; j < group_size; ++j) {
        qw.qvalues[r * qw.k + gi * group_size + j] = static_cast<std::uint8_t>(levels[j] + offset);
      }
    }
  }
  return qw;
}

Matrix dequantize(const QuantizedWeights& qw) {
  qw.validate();
  Matrix out(qw.m, qw.k);
  const int offset = qw.offset();
  for (std::size_t r = 0; r < qw.m; ++r) {
    for (std::size_t c = 0; c < qw.k; ++c) {
      out(r, c) = qw.scale(r, c) * static_cast<float>(static_cast<int>(qw.q(r, c)) - offset);
    }
  }
  return out;
}

float BitSerialParams::reconstruct(unsigned v) const {
  float acc = 0.0f;
  for (int i = 0; i < bits; ++i) {
    acc += alpha[i] * static_cast<float>(1u << i) * transform(static_cast<int>((v >> i) & 1u));
  }
  return acc + combined_bias;
}

BitSerialParams bit_serial_params(int bits) {
  if (bits < 1 || bits > 4) throw ParameterError("bits must be in [1,4], got " + std::to_string(bits));
  BitSerialParams p;
  p.bits = bits;
  // f(v) = a'v + b' with a' = s1 - s0, b' = s0; inverting gives alpha = 1/a', beta = -b'/a'.
  const float a_prime = BitSerialParams::s1 - BitSerialParams::s0;
  const float b_prime = BitSerialParams::s0;
  p.alpha.assign(bits, 1.0f / a_prime);
  p.beta.assign(bits, -b_prime / a_prime);
  for (int i = 0; i < bits; ++i) p.combined_bias += p.beta[i] * static_cast<float>(1u << i);
  return p;
}

void TileConfig::validate() const {
  if (g < 1 || g > 8) throw ParameterError("g must be in [1,8], got " + std::to_string(g));
  if (lanes == 0) throw ParameterError("lanes must be positive");
  if (n_tile == 0) throw ParameterError("n_tile must be positive");
  if (k_tile == 0 || k_tile % static_cast<std::size_t>(g) != 0) {
    throw ParameterError("k_tile=" + std::to_string(k_tile) + " is not a positive multiple of g=" + std::to_string(g));
  }
  if (m_tile == 0 || m_tile % lanes != 0) {
    throw ParameterError("m_tile=" + std::to_string(m_tile) + " is not a positive multiple of lanes=" +
                         std::to_string(lanes));
  }
}

bool TileConfig::valid() const noexcept {
  try {
    validate();
    return true;
  } catch (const Error&) {
    return false;
  }
}

TileConfig default_tile_config(std::size_t m, std::size_t k, int g) {
  TileConfig cfg;
  cfg.g = g;
  cfg.lanes = 16;
  cfg.n_tile = 1;
  cfg.m_tile = cfg.lanes;
  for (std::size_t t = 64; t >= cfg.lanes; t /= 2) {
    if (m % t == 0) {
      cfg.m_tile = t;
      break;
    }
  }
  const auto ug = static_cast<std::size_t>(g);
  cfg.k_tile = ug;
  for (std::size_t t = ug * 32; t >= ug; t /= 2) {
    if (t % ug == 0 && k % t == 0 && t <= 128) {
      cfg.k_tile = t;
      break;
    }
  }
  return cfg;
}

}  // namespace bitlut
