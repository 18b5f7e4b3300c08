#include "bitlut/rng.hpp"

#include <cmath>
#include <numbers>

namespace bitlut {

double GaussianRng::uniform() { return static_cast<double>(engine_() >> 11) * 0x1.0p-53; }

double GaussianRng::normal() {
  if (has_spare_) {
    has_spare_ = false;
    return spare_;
  }
  const double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
  const double u2 = uniform();
  const double r = std::sqrt(-2.0 * std::log(u1));
  const double theta = 2.0 * std::numbers::pi * u2;
  spare_ = r * std::sin(theta);
  has_spare_ = true;
  return r * std::cos(theta);
}

void GaussianRng::fill(std::span<float> out) {
  for (float& v : out) v = static_cast<float>(normal());
}

Matrix gaussian_matrix(std::size_t rows, std::size_t cols, GaussianRng& rng) {
  std::vector<float> data(rows * cols);
  rng.fill(data);
  return Matrix(rows, cols, std::move(data));
}

}  // namespace bitlut
