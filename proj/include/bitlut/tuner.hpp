#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "bitlut/core.hpp"
#include "bitlut/kernel.hpp"

namespace bitlut {

inline constexpr int kTuneCacheVersion = 1;

struct TuneKey {
  std::size_t m = 0;
  std::size_t k = 0;
  int bits = 4;
  int g = 4;
  std::string variant = "vector-q8";
  std::string machine_id;

  friend bool operator==(const TuneKey&, const TuneKey&) = default;
};

struct TuneResult {
  TuneKey key;
  TileConfig cfg;
  double throughput = 0.0;  // weight bytes per second
  std::int64_t timestamp = 0;  // unix seconds
  bool from_cache = false;
};

/// FNV-1a over the CPU model name and the lane width, as 16 hex digits.
std::string machine_id(std::size_t lanes = 16);
std::string cpu_model_name();

struct EnumerateOptions {
  std::size_t lanes = 16;
  std::size_t scratch_budget = 256 * 1024;  // bytes of float tables per activation block
};

/// Power-of-two m_tile in [lanes, 256]; k_tile = g * 2^j in [g, 256]; n_tile in {1, 4, 8}.
/// Keeps configs that pack without padding and whose table block fits the budget.
std::vector<TileConfig> enumerate_configs(std::size_t m, std::size_t k, int bits, int g,
                                          const EnumerateOptions& opts = {});

/// Index of the fastest candidate; ties go to the smaller table working set, then smaller m_tile.
std::size_t select_best(const std::vector<TileConfig>& configs, const std::vector<double>& throughput);

class TuneCache {
 public:
  /// Missing file means an empty cache.
  static TuneCache load(const std::string& path);
  void save(const std::string& path) const;

  static TuneCache parse(const std::string& text);
  std::string format() const;

  const TuneResult* find(const TuneKey& key) const;
  void put(const TuneResult& r);
  const std::vector<TuneResult>& entries() const { return entries_; }

 private:
  std::vector<TuneResult> entries_;
};

struct TuneOptions {
  KernelVariant variant = KernelVariant::vector_quantized;
  std::size_t group_size = 32;
  std::size_t n = 1;
  int warmup = 2;
  int runs = 5;
  int threads = 1;
  std::uint64_t seed = 1;
  double budget_ms = 0.0;  // stop starting new candidates after this; 0 = no limit
  EnumerateOptions enumerate;
  std::string cache_path;  // empty: no persistence
  // Test hook: replaces measurement, returns weight bytes per second.
  std::function<double(const TileConfig&)> measure;
};

/// Benchmarks every admissible config (the default config first) and returns the fastest.
TuneResult tune(std::size_t m, std::size_t k, int bits, int g, const TuneOptions& opts);

}  // namespace bitlut
