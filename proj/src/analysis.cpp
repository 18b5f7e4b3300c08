#include "bitlut/analysis.hpp"

#include <algorithm>
#include <chrono>
#include <limits>
#include <numeric>

#include "bitlut/oracle.hpp"
#include "bitlut/rng.hpp"
#include "bitlut/weight_prep.hpp"

namespace bitlut {

double nmse(std::span<const double> reference, std::span<const double> approx) {
  if (reference.size() != approx.size()) throw ShapeError("nmse operands differ in length");
  double num = 0.0, den = 0.0;
  for (std::size_t i = 0; i < reference.size(); ++i) {
    const double d = reference[i] - approx[i];
    num += d * d;
    den += reference[i] * reference[i];
  }
  if (den == 0.0) return num == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
  return num / den;
}

std::vector<double> exact_product(const Matrix& a, const Matrix& w) {
  if (a.cols() != w.cols()) throw ShapeError("exact_product: inner dimensions differ");
  std::vector<double> out(a.rows() * w.rows());
  for (std::size_t n = 0; n < a.rows(); ++n) {
    const auto x = a.row(n);
    for (std::size_t m = 0; m < w.rows(); ++m) {
      const auto y = w.row(m);
      double s = 0.0;
      for (std::size_t k = 0; k < x.size(); ++k) s += static_cast<double>(x[k]) * y[k];
      out[n * w.rows() + m] = s;
    }
  }
  return out;
}

std::vector<double> to_double(const Matrix& m) {
  std::vector<double> out;
  out.reserve(m.rows() * m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (float v : m.row(r)) out.push_back(v);
  }
  return out;
}

std::vector<NmseRow> nmse_report(const NmseCase& c, const std::vector<KernelVariant>& variants) {
  GaussianRng rng(c.seed);
  const Matrix w = gaussian_matrix(c.m, c.k, rng);
  const Matrix a = gaussian_matrix(c.n, c.k, rng);
  const auto truth = exact_product(a, w);

  const QuantizedWeights qw = quantize_rtn(w, c.bits, c.group_size);
  std::vector<NmseRow> rows;
  rows.push_back({"reference", nmse(truth, to_double(oracle::reference_mpgemm(a, qw)))});
  if (variants.empty()) return rows;

  const TileConfig cfg = default_tile_config(c.m, c.k, 4);
  const PackedWeights pw = prepack(qw, cfg);
  KernelOptions opts;
  opts.threads = c.threads;
  for (KernelVariant v : variants) {
    rows.push_back({std::string(to_string(v)), nmse(truth, to_double(mpgemm(a, pw, cfg, v, opts)))});
  }
  return rows;
}

TimingStats summarize(std::vector<double> samples_ns) {
  TimingStats s;
  s.samples_ns = samples_ns;
  if (samples_ns.empty()) return s;
  std::sort(samples_ns.begin(), samples_ns.end());
  const std::size_t n = samples_ns.size();
  s.median_ns = n % 2 == 1 ? samples_ns[n / 2] : 0.5 * (samples_ns[n / 2 - 1] + samples_ns[n / 2]);
  s.mean_ns = std::accumulate(samples_ns.begin(), samples_ns.end(), 0.0) / static_cast<double>(n);
  s.min_ns = samples_ns.front();
  return s;
}

TimingStats time_runs(const std::function<void()>& fn, int warmup, int reps) {
  if (reps < 1) throw ParameterError("reps must be at least 1");
  for (int i = 0; i < warmup; ++i) fn();
  std::vector<double> samples;
  samples.reserve(static_cast<std::size_t>(reps));
  for (int i = 0; i < reps; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    fn();
    const auto t1 = std::chrono::steady_clock::now();
    samples.push_back(std::chrono::duration<double, std::nano>(t1 - t0).count());
  }
  return summarize(std::move(samples));
}

}  // namespace bitlut
