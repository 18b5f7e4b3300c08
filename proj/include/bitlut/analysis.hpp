#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "bitlut/core.hpp"
#include "bitlut/kernel.hpp"

namespace bitlut {

/// sum (y - yhat)^2 / sum y^2 over all elements.
double nmse(std::span<const double> reference, std::span<const double> approx);

/// Unquantized A x W^T in double precision, k ascending.
std::vector<double> exact_product(const Matrix& a, const Matrix& w);

std::vector<double> to_double(const Matrix& m);

struct NmseCase {
  std::size_t m = 4096;
  std::size_t k = 4096;
  std::size_t n = 1;
  int bits = 4;
  std::size_t group_size = 32;
  std::uint64_t seed = 1;
  int threads = 1;
};

struct NmseRow {
  std::string name;  // "reference" or a variant spelling
  double nmse = 0.0;
};

/// Draws W (m x k) and then A (n x k) from one Gaussian stream seeded with `seed`,
/// quantizes W, and scores every requested variant against the unquantized product.
/// The first row is always the dequantize-then-multiply baseline.
std::vector<NmseRow> nmse_report(const NmseCase& c, const std::vector<KernelVariant>& variants);

struct TimingStats {
  std::vector<double> samples_ns;
  double median_ns = 0.0;
  double mean_ns = 0.0;
  double min_ns = 0.0;
};

TimingStats summarize(std::vector<double> samples_ns);

/// Runs `fn` warmup times untimed, then reps times on the monotonic clock.
TimingStats time_runs(const std::function<void()>& fn, int warmup, int reps);

}  // namespace bitlut
