// Kernel throughput: dequantizing reference against the table kernels, serial and OpenMP.
#include <benchmark/benchmark.h>

#include <omp.h>

#include <algorithm>
#include <map>
#include <tuple>
#include <utility>

#include "bitlut/kernel.hpp"
#include "bitlut/oracle.hpp"
#include "bitlut/rng.hpp"
#include "bitlut/weight_prep.hpp"

using namespace bitlut;

namespace {

struct Fixture {
  QuantizedWeights qw;
  PackedWeights pw;
  TileConfig cfg;
  Matrix a;
};

const Fixture& fixture(std::size_t m, std::size_t k, int bits) {
  static std::map<std::tuple<std::size_t, std::size_t, int>, Fixture> cache;
  auto [it, fresh] = cache.try_emplace({m, k, bits});
  if (fresh) {
    GaussianRng rng(1);
    auto& f = it->second;
    f.qw = quantize_rtn(gaussian_matrix(m, k, rng), bits, 32);
    f.a = gaussian_matrix(1, k, rng);
    f.cfg = default_tile_config(m, k, 4);
    f.pw = prepack(f.qw, f.cfg);
  }
  return it->second;
}

void report(benchmark::State& state, const Fixture& f) {
  state.SetBytesProcessed(static_cast<std::int64_t>(state.iterations()) *
                          static_cast<std::int64_t>(f.qw.m * f.qw.k * static_cast<std::size_t>(f.qw.bits) / 8));
}

void BM_Reference(benchmark::State& state) {
  const auto& f = fixture(static_cast<std::size_t>(state.range(0)), static_cast<std::size_t>(state.range(1)),
                          static_cast<int>(state.range(2)));
  for (auto _ : state) benchmark::DoNotOptimize(oracle::reference_mpgemm(f.a, f.qw));
  report(state, f);
}

template <KernelVariant V>
void BM_Kernel(benchmark::State& state) {
  const auto& f = fixture(static_cast<std::size_t>(state.range(0)), static_cast<std::size_t>(state.range(1)),
                          static_cast<int>(state.range(2)));
  KernelOptions o;
  o.threads = static_cast<int>(state.range(3));
  for (auto _ : state) benchmark::DoNotOptimize(mpgemm(f.a, f.pw, f.cfg, V, o));
  report(state, f);
}

// m, k, bits[, threads]
void shapes(benchmark::internal::Benchmark* b, bool threaded) {
  const int hw = std::max(1, omp_get_num_procs());
  for (int bits : {1, 2, 4}) {
    for (auto [m, k] : {std::pair{4096, 4096}, std::pair{11008, 4096}}) {
      if (!threaded) {
        b->Args({m, k, bits});
        continue;
      }
      b->Args({m, k, bits, 1});
      if (hw > 1) b->Args({m, k, bits, hw});
    }
  }
  b->Unit(benchmark::kMicrosecond);
}

}  // namespace

BENCHMARK(BM_Reference)->Apply([](auto* b) { shapes(b, false); });
BENCHMARK(BM_Kernel<KernelVariant::scalar_quantized>)->Apply([](auto* b) { shapes(b, true); });
BENCHMARK(BM_Kernel<KernelVariant::vector_quantized>)->Apply([](auto* b) { shapes(b, true); });
BENCHMARK(BM_Kernel<KernelVariant::vector_fast_aggregation>)->Apply([](auto* b) { shapes(b, true); });

BENCHMARK_MAIN();
