#include <gtest/gtest.h>

#include <filesystem>
#include <set>

#include "bitlut/analysis.hpp"
#include "bitlut/rng.hpp"
#include "bitlut/tuner.hpp"
#include "bitlut/weight_prep.hpp"

using namespace bitlut;

namespace {
std::string temp_path(const char* name) {
  const auto dir = std::filesystem::temp_directory_path() / "bitlut_tuner_test";
  std::filesystem::create_directories(dir);
  const auto p = dir / name;
  std::filesystem::remove(p);
  return p.string();
}
}  // namespace

TEST(EnumerateConfigs, SmallShape) {
  const auto cs = enumerate_configs(16, 16, 4, 4);
  std::set<std::size_t> k_tiles;
  for (const auto& c : cs) {
    EXPECT_EQ(c.m_tile, 16u);
    k_tiles.insert(c.k_tile);
  }
  EXPECT_EQ(k_tiles, (std::set<std::size_t>{4, 8, 16}));
  EXPECT_EQ(cs.size(), 9u);  // x n_tile in {1, 4, 8}
}

TEST(EnumerateConfigs, ZeroBudgetIsEmptyAndTuneFails) {
  EnumerateOptions o;
  o.scratch_budget = 0;
  EXPECT_TRUE(enumerate_configs(64, 64, 4, 4, o).empty());
  TuneOptions t;
  t.enumerate = o;
  t.measure = [](const TileConfig&) { return 1.0; };
  try {
    tune(64, 64, 4, 4, t);
    FAIL();
  } catch (const TuningError& e) {
    EXPECT_NE(std::string(e.what()).find("scratch budget"), std::string::npos);
  }
}

TEST(EnumerateConfigs, EveryConfigIsValidAndPackable) {
  for (int g = 1; g <= 8; ++g) {
    for (auto [m, k] : {std::pair<std::size_t, std::size_t>{256, 512}, {48, 96}, {4096, 11008}}) {
      for (const auto& c : enumerate_configs(m, k, 2, g)) {
        EXPECT_TRUE(c.valid());
        EXPECT_EQ(m % c.m_tile, 0u);
        EXPECT_EQ(k % c.k_tile, 0u);
        EXPECT_LE(c.m_tile, 256u);
        EXPECT_LE(c.k_tile, 256u);
        EXPECT_EQ(c.m_tile & (c.m_tile - 1), 0u);
        EXPECT_LE(c.lut_entries() * sizeof(float), EnumerateOptions{}.scratch_budget);
      }
    }
  }
}

TEST(SelectBest, TiesPreferSmallerWorkingSetThenMTile) {
  const std::vector<TileConfig> cs = {{1, 64, 128, 4, 16}, {4, 32, 128, 4, 16}, {1, 32, 128, 4, 16}, {1, 16, 64, 4, 16}};
  EXPECT_EQ(select_best(cs, {1, 2, 3, 0.5}), 2u);
  EXPECT_EQ(select_best(cs, {5, 5, 5, 1}), 2u);  // 0 and 2 tie on working set, 2 has smaller m_tile
  EXPECT_EQ(select_best(cs, {5, 5, 1, 5}), 3u);  // smallest working set wins
  // Permuting the candidate order does not change the winner.
  const std::vector<TileConfig> rev(cs.rbegin(), cs.rend());
  EXPECT_EQ(rev[select_best(rev, {1, 5, 5, 5})], cs[2]);
}

TEST(Tune, SingleCandidateReturned) {
  EnumerateOptions o;
  o.scratch_budget = 4 * 8;  // only k_tile=4 (one table of 8 floats), n_tile=1
  const auto cs = enumerate_configs(16, 16, 2, 4, o);
  ASSERT_EQ(cs.size(), 1u);
  TuneOptions t;
  t.enumerate = o;
  t.group_size = 16;
  t.measure = [](const TileConfig&) { return 42.0; };
  const auto r = tune(16, 16, 2, 4, t);
  EXPECT_EQ(r.cfg, cs[0]);
  EXPECT_EQ(r.throughput, 42.0);
  EXPECT_FALSE(r.from_cache);
}

TEST(Tune, CacheHitSkipsBenchmark) {
  const std::string path = temp_path("hit.txt");
  TuneOptions t;
  t.cache_path = path;
  int calls = 0;
  t.measure = [&](const TileConfig& c) {
    ++calls;
    return static_cast<double>(c.k_tile);
  };
  const auto first = tune(64, 128, 3, 4, t);
  EXPECT_GT(calls, 0);
  EXPECT_EQ(first.cfg.k_tile, 128u);
  calls = 0;
  const auto second = tune(64, 128, 3, 4, t);
  EXPECT_EQ(calls, 0);
  EXPECT_TRUE(second.from_cache);
  EXPECT_EQ(second.cfg, first.cfg);
  EXPECT_EQ(second.throughput, first.throughput);
  // A different variant is a different key.
  t.variant = KernelVariant::scalar_quantized;
  (void)tune(64, 128, 3, 4, t);
  EXPECT_GT(calls, 0);
  EXPECT_EQ(TuneCache::load(path).entries().size(), 2u);
}

TEST(Tune, DefaultConfigMeasuredFirst) {
  TuneOptions t;
  std::vector<TileConfig> seen;
  t.measure = [&](const TileConfig& c) {
    seen.push_back(c);
    return 1.0;
  };
  (void)tune(256, 512, 4, 4, t);
  ASSERT_FALSE(seen.empty());
  EXPECT_EQ(seen.front(), default_tile_config(256, 512, 4));
}

TEST(Tune, MeasuredWinnerAtLeastDefault) {
  // Real timings routed through the hook so every measurement can be inspected.
  GaussianRng rng(5);
  const auto qw = quantize_rtn(gaussian_matrix(256, 1024, rng), 4, 32);
  const auto a = gaussian_matrix(1, 1024, rng);
  std::vector<std::pair<TileConfig, double>> seen;
  TuneOptions t;
  t.budget_ms = 3000;
  t.measure = [&](const TileConfig& c) {
    const auto pw = prepack(qw, c);
    const auto s = time_runs([&] { (void)mpgemm(a, pw, c, KernelVariant::vector_quantized); }, 2, 5);
    const double tp = static_cast<double>(pw.payload_bytes()) / (s.median_ns * 1e-9);
    seen.emplace_back(c, tp);
    return tp;
  };
  const auto r = tune(256, 1024, 4, 4, t);
  ASSERT_FALSE(seen.empty());
  EXPECT_EQ(seen.front().first, default_tile_config(256, 1024, 4));
  EXPECT_GE(r.throughput, seen.front().second);
  for (const auto& [c, tp] : seen) EXPECT_GE(r.throughput, tp);
}

TEST(TuneCache, FormatParseRoundTrip) {
  TuneCache c;
  TuneResult r;
  r.key = {4096, 11008, 2, 4, "fast-agg", "0123456789abcdef"};
  r.cfg = {4, 128, 64, 4, 16};
  r.throughput = 1.0 / 3.0 * 1e10;
  r.timestamp = 1700000000;
  c.put(r);
  r.key.bits = 3;
  c.put(r);
  const auto text = c.format();
  EXPECT_EQ(text.rfind("bitlut-tune-cache 1\n", 0), 0u);
  const auto back = TuneCache::parse(text);
  ASSERT_EQ(back.entries().size(), 2u);
  EXPECT_EQ(back.entries()[0].key, c.entries()[0].key);
  EXPECT_EQ(back.entries()[0].cfg, c.entries()[0].cfg);
  EXPECT_EQ(back.entries()[0].throughput, c.entries()[0].throughput);
  EXPECT_EQ(back.format(), text);
}

TEST(TuneCache, SaveLoadAndReplace) {
  const std::string path = temp_path("cache.txt");
  EXPECT_TRUE(TuneCache::load(path).entries().empty());
  TuneCache c;
  TuneResult r;
  r.key = {64, 64, 4, 4, "vector-q8", "m"};
  r.throughput = 1;
  c.put(r);
  r.throughput = 2;
  c.put(r);
  c.save(path);
  const auto back = TuneCache::load(path);
  ASSERT_EQ(back.entries().size(), 1u);
  EXPECT_EQ(back.entries()[0].throughput, 2.0);
}

TEST(TuneCache, RejectsMalformed) {
  EXPECT_THROW(TuneCache::parse("not-a-cache 1\n"), BadMagicError);
  EXPECT_THROW(TuneCache::parse("bitlut-tune-cache 2\n"), VersionMismatchError);
  const std::string head = "bitlut-tune-cache 1\n";
  EXPECT_THROW(TuneCache::parse(head + "m=1 k=2\n"), InputError);
  EXPECT_THROW(TuneCache::parse(head +
                                "m=64 k=64 bits=4 g=4 variant=vector-q8 machine=x n_tile=1 m_tile=24 k_tile=32 lanes=16 "
                                "throughput=1 timestamp=0\n"),
               InputError);
  EXPECT_THROW(TuneCache::parse(head +
                                "m=64 k=64 bits=4 g=4 variant=vector-q8 machine=x n_tile=1 m_tile=16 k_tile=32 lanes=16 "
                                "throughput=1 timestamp=0 extra=1\n"),
               InputError);
  EXPECT_NO_THROW(TuneCache::parse(head + "# comment\n\n"));
}

TEST(MachineId, StableHex) {
  const auto a = machine_id(16);
  EXPECT_EQ(a, machine_id(16));
  EXPECT_NE(a, machine_id(32));
  EXPECT_EQ(a.size(), 16u);
}
