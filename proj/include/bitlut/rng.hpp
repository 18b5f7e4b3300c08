#pragma once

#include <cstdint>
#include <random>
#include <span>

#include "bitlut/core.hpp"

namespace bitlut {

/// Standard normal samples from mt19937_64 through the Box-Muller transform.
/// The engine output is fixed by the C++ standard; uniforms take the top 53 bits.
class GaussianRng {
 public:
  explicit GaussianRng(std::uint64_t seed) : engine_(seed) {}

  double uniform();  // [0, 1)
  double normal();
  void fill(std::span<float> out);

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

Matrix gaussian_matrix(std::size_t rows, std::size_t cols, GaussianRng& rng);

}  // namespace bitlut
