#include "bitlut/tuner.hpp"

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>

#include "bitlut/analysis.hpp"
#include "bitlut/io.hpp"
#include "bitlut/rng.hpp"
#include "bitlut/weight_prep.hpp"

namespace bitlut {

namespace {

constexpr const char* kCacheHeader = "bitlut-tune-cache";

std::vector<TileConfig> enumerate_impl(std::size_t m, std::size_t k, int g, const EnumerateOptions& opts,
                                       std::map<std::string, int>* rejected) {
  if (g < 1 || g > 8) throw ParameterError("g must be in [1,8], got " + std::to_string(g));
  if (opts.lanes == 0) throw ParameterError("lanes must be positive");
  const auto ug = static_cast<std::size_t>(g);
  auto reject = [&](const char* why) {
    if (rejected != nullptr) ++(*rejected)[why];
  };
  std::vector<TileConfig> out;
  for (std::size_t m_tile = 1; m_tile <= 256; m_tile *= 2) {
    if (m_tile < opts.lanes) continue;
    for (std::size_t k_tile = ug; k_tile <= 256; k_tile *= 2) {
      for (std::size_t n_tile : {1, 4, 8}) {
        TileConfig c{n_tile, m_tile, k_tile, g, opts.lanes};
        if (!c.valid()) {
          reject("invalid tile");
        } else if (m % m_tile != 0) {
          reject("M not divisible by m_tile");
        } else if (k % k_tile != 0) {
          reject("K not divisible by k_tile");
        } else if ((m_tile / opts.lanes * (k / ug)) % slots_per_byte(g) != 0) {
          reject("interleave block not filled");
        } else if (c.lut_entries() * sizeof(float) > opts.scratch_budget) {
          reject("table block exceeds scratch budget");
        } else {
          out.push_back(c);
        }
      }
    }
  }
  return out;
}

std::string describe(const std::map<std::string, int>& reasons) {
  std::string s;
  for (const auto& [why, count] : reasons) {
    if (!s.empty()) s += "; ";
    s += why + " x" + std::to_string(count);
  }
  return s.empty() ? "no candidates" : s;
}

std::string format_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string cpu_model_name() {
  std::ifstream in("/proc/cpuinfo");
  std::string line;
  while (std::getline(in, line)) {
    if (line.rfind("model name", 0) == 0) {
      const auto colon = line.find(':');
      if (colon != std::string::npos) {
        auto v = line.substr(colon + 1);
        v.erase(0, v.find_first_not_of(' '));
        return v;
      }
    }
  }
  return "unknown";
}

std::string machine_id(std::size_t lanes) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : cpu_model_name() + "|lanes=" + std::to_string(lanes)) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::vector<TileConfig> enumerate_configs(std::size_t m, std::size_t k, int bits, int g, const EnumerateOptions& opts) {
  if (bits < 1 || bits > 4) throw ParameterError("bits must be in [1,4], got " + std::to_string(bits));
  return enumerate_impl(m, k, g, opts, nullptr);
}

std::size_t select_best(const std::vector<TileConfig>& configs, const std::vector<double>& throughput) {
  if (configs.empty() || configs.size() != throughput.size()) {
    throw TuningError("select_best needs one throughput per config");
  }
  std::size_t best = 0;
  for (std::size_t i = 1; i < configs.size(); ++i) {
    const auto& a = configs[i];
    const auto& b = configs[best];
    if (throughput[i] != throughput[best]) {
      if (throughput[i] > throughput[best]) best = i;
    } else if (a.lut_entries() != b.lut_entries()) {
      if (a.lut_entries() < b.lut_entries()) best = i;
    } else if (a.m_tile < b.m_tile) {
      best = i;
    }
  }
  return best;
}

// ---- cache ----

TuneCache TuneCache::parse(const std::string& text) {
  TuneCache cache;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  bool header = false;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    if (!header) {
      std::string tag;
      int version = 0;
      ls >> tag >> version;
      if (tag != kCacheHeader) throw BadMagicError("tune cache: missing '" + std::string(kCacheHeader) + "' header");
      if (version != kTuneCacheVersion) {
        throw VersionMismatchError("tune cache version " + std::to_string(version) + " is not supported (expected " +
                                   std::to_string(kTuneCacheVersion) + ")");
      }
      header = true;
      continue;
    }
    std::map<std::string, std::string> kv;
    std::string tok;
    while (ls >> tok) {
      const auto eq = tok.find('=');
      if (eq == std::string::npos || eq == 0) {
        throw InputError("tune cache line " + std::to_string(lineno) + ": token '" + tok + "' is not key=value");
      }
      kv[tok.substr(0, eq)] = tok.substr(eq + 1);
    }
    auto take = [&](const char* key) -> std::string {
      auto it = kv.find(key);
      if (it == kv.end()) throw InputError("tune cache line " + std::to_string(lineno) + ": missing '" + key + "'");
      std::string v = it->second;
      kv.erase(it);
      return v;
    };
    TuneResult r;
    try {
      r.key.m = std::stoull(take("m"));
      r.key.k = std::stoull(take("k"));
      r.key.bits = std::stoi(take("bits"));
      r.key.g = std::stoi(take("g"));
      r.key.variant = take("variant");
      r.key.machine_id = take("machine");
      r.cfg.n_tile = std::stoull(take("n_tile"));
      r.cfg.m_tile = std::stoull(take("m_tile"));
      r.cfg.k_tile = std::stoull(take("k_tile"));
      r.cfg.lanes = std::stoull(take("lanes"));
      r.cfg.g = r.key.g;
      r.throughput = std::stod(take("throughput"));
      r.timestamp = std::stoll(take("timestamp"));
    } catch (const std::logic_error&) {
      throw InputError("tune cache line " + std::to_string(lineno) + ": malformed number");
    }
    if (!kv.empty()) {
      throw InputError("tune cache line " + std::to_string(lineno) + ": unknown key '" + kv.begin()->first + "'");
    }
    parse_variant(r.key.variant);
    try {
      r.cfg.validate();
    } catch (const Error& e) {
      throw InputError("tune cache line " + std::to_string(lineno) + ": " + e.what());
    }
    cache.put(r);
  }
  if (!header && lineno > 0 && !text.empty()) {
    throw BadMagicError("tune cache: missing '" + std::string(kCacheHeader) + "' header");
  }
  return cache;
}

std::string TuneCache::format() const {
  std::string s = std::string(kCacheHeader) + " " + std::to_string(kTuneCacheVersion) + "\n";
  for (const auto& r : entries_) {
    s += "m=" + std::to_string(r.key.m) + " k=" + std::to_string(r.key.k) + " bits=" + std::to_string(r.key.bits) +
         " g=" + std::to_string(r.key.g) + " variant=" + r.key.variant + " machine=" + r.key.machine_id +
         " n_tile=" + std::to_string(r.cfg.n_tile) + " m_tile=" + std::to_string(r.cfg.m_tile) +
         " k_tile=" + std::to_string(r.cfg.k_tile) + " lanes=" + std::to_string(r.cfg.lanes) +
         " throughput=" + format_double(r.throughput) + " timestamp=" + std::to_string(r.timestamp) + "\n";
  }
  return s;
}

TuneCache TuneCache::load(const std::string& path) {
  if (!std::filesystem::exists(path)) return {};
  const auto bytes = read_file(path);
  return parse(std::string(bytes.begin(), bytes.end()));
}

void TuneCache::save(const std::string& path) const {
  const std::string text = format();
  write_file_atomic(path, std::span(reinterpret_cast<const std::uint8_t*>(text.data()), text.size()));
}

const TuneResult* TuneCache::find(const TuneKey& key) const {
  for (const auto& r : entries_) {
    if (r.key == key) return &r;
  }
  return nullptr;
}

void TuneCache::put(const TuneResult& r) {
  for (auto& e : entries_) {
    if (e.key == r.key) {
      e = r;
      e.from_cache = false;
      return;
    }
  }
  entries_.push_back(r);
  entries_.back().from_cache = false;
}

// ---- search ----

TuneResult tune(std::size_t m, std::size_t k, int bits, int g, const TuneOptions& opts) {
  if (bits < 1 || bits > 4) throw ParameterError("bits must be in [1,4], got " + std::to_string(bits));
  if (opts.runs < 5 || opts.warmup < 2) throw ParameterError("tuning needs at least 2 warmups and 5 timed runs");
  TuneKey key{m, k, bits, g, std::string(to_string(opts.variant)), machine_id(opts.enumerate.lanes)};

  TuneCache cache;
  if (!opts.cache_path.empty()) {
    cache = TuneCache::load(opts.cache_path);
    if (const TuneResult* hit = cache.find(key)) {
      TuneResult r = *hit;
      r.from_cache = true;
      return r;
    }
  }

  std::map<std::string, int> reasons;
  auto configs = enumerate_impl(m, k, g, opts.enumerate, &reasons);
  const TileConfig fallback = default_tile_config(m, k, g);
  for (std::size_t i = 0; i < configs.size(); ++i) {
    if (configs[i] == fallback) {
      std::rotate(configs.begin(), configs.begin() + static_cast<std::ptrdiff_t>(i),
                  configs.begin() + static_cast<std::ptrdiff_t>(i) + 1);
      break;
    }
  }

  // Weights and activations are only materialized when timings are real.
  std::optional<QuantizedWeights> qw;
  std::optional<Matrix> a;
  if (!opts.measure) {
    GaussianRng rng(opts.seed);
    qw = quantize_rtn(gaussian_matrix(m, k, rng), bits, opts.group_size);
    a = gaussian_matrix(opts.n, k, rng);
  } else {
    qw = QuantizedWeights{m, k, bits, opts.group_size, std::vector<std::uint8_t>(m * k, 0),
                          std::vector<float>(m * (opts.group_size ? k / opts.group_size : 0), 1.0f)};
  }
  const double weight_bytes = static_cast<double>(m) * static_cast<double>(k) * bits / 8.0;

  std::vector<TileConfig> measured;
  std::vector<double> throughput;
  const auto start = std::chrono::steady_clock::now();
  for (const auto& cfg : configs) {
    const double elapsed_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
    if (!measured.empty() && opts.budget_ms > 0 && elapsed_ms > opts.budget_ms) break;
    PackedWeights pw;
    try {
      pw = prepack(*qw, cfg);
      check_kernel_config(pw, cfg, opts.variant);
    } catch (const Error& e) {
      ++reasons[std::string("kernel rejects config: ") + e.what()];
      continue;
    }
    double tp = 0.0;
    if (opts.measure) {
      tp = opts.measure(cfg);
    } else {
      KernelOptions kopts;
      kopts.threads = opts.threads;
      const auto t = time_runs([&] { (void)mpgemm(*a, pw, cfg, opts.variant, kopts); }, opts.warmup, opts.runs);
      tp = weight_bytes / (t.median_ns * 1e-9);
    }
    measured.push_back(cfg);
    throughput.push_back(tp);
  }
  if (measured.empty()) {
    throw TuningError("no admissible tile configuration for M=" + std::to_string(m) + " K=" + std::to_string(k) +
                      ": " + describe(reasons));
  }

  const std::size_t best = select_best(measured, throughput);
  TuneResult r;
  r.key = key;
  r.cfg = measured[best];
  r.throughput = throughput[best];
  r.timestamp = std::chrono::duration_cast<std::chrono::seconds>(
                    std::chrono::system_clock::now().time_since_epoch())
                    .count();
  if (!opts.cache_path.empty()) {
    cache.put(r);
    cache.save(opts.cache_path);
  }
  return r;
}

}  // namespace bitlut
