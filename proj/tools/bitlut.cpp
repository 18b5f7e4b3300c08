// bitlut: command-line entry points for quantization, packing, benchmarking,
// error analysis and tile tuning. Errors go to stderr as "E_CODE: message".

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "bitlut/analysis.hpp"
#include "bitlut/io.hpp"
#include "bitlut/kernel.hpp"
#include "bitlut/rng.hpp"
#include "bitlut/tuner.hpp"
#include "bitlut/weight_prep.hpp"

using json = nlohmann::ordered_json;
using namespace bitlut;

namespace {

constexpr int kBenchSchemaVersion = 1;

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  std::replace(s.begin(), s.end(), '\r', ' ');
  while (!s.empty() && s.back() == ' ') s.pop_back();
  return s;
}

void emit(const json& j, bool as_json, const std::string& text) {
  if (as_json) {
    std::cout << j.dump(2) << "\n";
  } else {
    std::cout << text;
  }
}

json tile_json(const TileConfig& c) {
  return {{"n_tile", c.n_tile}, {"m_tile", c.m_tile}, {"k_tile", c.k_tile}, {"g", c.g}, {"lanes", c.lanes}};
}

TileConfig tile_from_flags(std::size_t m, std::size_t k, int g, std::size_t tile_m, std::size_t tile_k) {
  TileConfig cfg = default_tile_config(m, k, g);
  if (tile_m != 0) cfg.m_tile = tile_m;
  if (tile_k != 0) cfg.k_tile = tile_k;
  cfg.validate();
  return cfg;
}

// ---- generate ----

struct GenerateArgs {
  std::size_t rows = 0, cols = 0;
  std::string fill = "gaussian";
  float value = 0.0f;
  std::uint64_t seed = 1;
  std::string output;
};

int run_generate(const GenerateArgs& a) {
  Matrix m;
  if (a.fill == "gaussian") {
    GaussianRng rng(a.seed);
    m = gaussian_matrix(a.rows, a.cols, rng);
  } else if (a.fill == "const") {
    m = Matrix(a.rows, a.cols, std::vector<float>(a.rows * a.cols, a.value));
  } else {
    throw ParameterError("unknown fill '" + a.fill + "' (gaussian|const)");
  }
  write_file_atomic(a.output, encode_matrix(m));
  return 0;
}

// ---- quantize ----

struct QuantizeArgs {
  std::string input, output;
  int bits = 4;
  std::size_t group_size = 32;
  bool json_out = false;
};

int run_quantize(const QuantizeArgs& a) {
  const Matrix w = decode_matrix(read_file(a.input));
  const QuantizedWeights qw = quantize_rtn(w, a.bits, a.group_size);
  write_file_atomic(a.output, encode_quantized(qw));

  const Matrix d = dequantize(qw);
  double max_err = 0.0, sum_err = 0.0, sq_err = 0.0, sq_ref = 0.0;
  for (std::size_t r = 0; r < w.rows(); ++r) {
    for (std::size_t c = 0; c < w.cols(); ++c) {
      const double e = static_cast<double>(w(r, c)) - d(r, c);
      max_err = std::max(max_err, std::fabs(e));
      sum_err += std::fabs(e);
      sq_err += e * e;
      sq_ref += static_cast<double>(w(r, c)) * w(r, c);
    }
  }
  const double count = static_cast<double>(w.rows() * w.cols());
  const double mean_err = count > 0 ? sum_err / count : 0.0;
  const double rel_rms = sq_ref > 0 ? std::sqrt(sq_err / sq_ref) : (sq_err > 0 ? INFINITY : 0.0);
  json j = {{"command", "quantize"},
            {"rows", w.rows()},
            {"cols", w.cols()},
            {"bits", a.bits},
            {"group_size", a.group_size},
            {"max_abs_error", max_err},
            {"mean_abs_error", mean_err},
            {"rel_rms_error", rel_rms}};
  char buf[256];
  std::snprintf(buf, sizeof buf, "quantized %zux%zu to %d bits (group %zu): max |err| %.6g, mean |err| %.6g, rel RMS %.6g\n",
                w.rows(), w.cols(), a.bits, a.group_size, max_err, mean_err, rel_rms);
  emit(j, a.json_out, buf);
  return 0;
}

// ---- prepack ----

struct PrepackArgs {
  std::string input, output;
  int g = 4;
  std::size_t tile_m = 0, tile_k = 0;
  bool verify = false;
  bool json_out = false;
};

int run_prepack(const PrepackArgs& a) {
  const QuantizedWeights qw = decode_quantized(read_file(a.input));
  const TileConfig cfg = tile_from_flags(qw.m, qw.k, a.g, a.tile_m, a.tile_k);
  const PackedWeights pw = prepack(qw, cfg);
  const auto bytes = serialize(pw);
  write_file_atomic(a.output, bytes);

  std::optional<bool> verified;
  if (a.verify) {
    const PackedWeights back = deserialize(read_file(a.output));
    const auto expect = decompose_bits(pad_k(qw, cfg.k_tile), cfg.g);
    if (unpack_planes(back) != expect || back != pw) {
      throw LayoutError("verification failed: re-read planes differ from the decomposed weights");
    }
    verified = true;
  }
  const std::size_t m_blocks = pw.m / cfg.m_tile;
  const std::size_t k_blocks = pw.k / cfg.k_tile;
  json j = {{"command", "prepack"},
            {"m", pw.m},
            {"k", pw.k_logical},
            {"k_padded", pw.k},
            {"bits", pw.bits},
            {"g", pw.g},
            {"group_size", pw.group_size},
            {"tile", tile_json(cfg)},
            {"layout_version", pw.layout_version},
            {"planes", pw.planes.size()},
            {"plane_bytes", pw.plane_bytes()},
            {"payload_bytes", pw.payload_bytes()},
            {"file_bytes", bytes.size()},
            {"m_blocks", m_blocks},
            {"k_blocks", k_blocks},
            {"tiles", m_blocks * k_blocks}};
  if (verified) j["verified"] = *verified;
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "packed %zux%zu (K padded to %zu), %d planes x %zu bytes = %zu payload bytes, %zu file bytes\n"
                "tiles: %zu M blocks x %zu K blocks (m_tile %zu, k_tile %zu, g %d)%s\n",
                pw.m, pw.k_logical, pw.k, pw.bits, pw.plane_bytes(), pw.payload_bytes(), bytes.size(), m_blocks,
                k_blocks, cfg.m_tile, cfg.k_tile, pw.g, verified ? ", verified" : "");
  emit(j, a.json_out, buf);
  return 0;
}

// ---- bench ----

struct BenchArgs {
  std::string input;
  std::size_t m = 0, k = 0;
  int bits = 4;
  int g = 4;
  std::size_t group_size = 32;
  std::size_t tile_m = 0, tile_k = 0;
  std::string mode = "gemv";
  std::size_t n = 1;
  std::string variant = "vector-q8";
  int reps = 10;
  int warmup = 2;
  int threads = 1;
  std::uint64_t seed = 1;
  bool bit_scaling = false;
  std::string tune_cache;
};

struct Workload {
  PackedWeights pw;
  TileConfig cfg;
  std::string source;
};

Workload synthetic_workload(const BenchArgs& a, int bits, KernelVariant v) {
  GaussianRng rng(a.seed);
  const QuantizedWeights qw = quantize_rtn(gaussian_matrix(a.m, a.k, rng), bits, a.group_size);
  TileConfig cfg = tile_from_flags(a.m, a.k, a.g, a.tile_m, a.tile_k);
  std::string source = a.tile_m == 0 && a.tile_k == 0 ? "default" : "flags";
  if (!a.tune_cache.empty() && a.tile_m == 0 && a.tile_k == 0) {
    const TuneCache cache = TuneCache::load(a.tune_cache);
    if (const TuneResult* hit = cache.find({a.m, a.k, bits, a.g, std::string(to_string(v)), machine_id(16)})) {
      cfg = hit->cfg;
      source = "tune-cache";
    }
  }
  return {prepack(qw, cfg), cfg, source};
}

TimingStats time_kernel(const Matrix& act, const Workload& w, KernelVariant v, const BenchArgs& a) {
  KernelOptions opts;
  opts.threads = a.threads;
  return time_runs([&] { (void)mpgemm(act, w.pw, w.cfg, v, opts); }, a.warmup, a.reps);
}

int run_bench(const BenchArgs& a) {
  const KernelVariant v = parse_variant(a.variant);
  if (a.mode != "gemv" && a.mode != "gemm") throw ParameterError("mode must be gemv or gemm");
  if (a.reps < 1) throw ParameterError("reps must be at least 1");
  if (a.warmup < 0) throw ParameterError("warmup must be non-negative");
  const std::size_t n = a.mode == "gemv" ? 1 : a.n;
  if (n == 0) throw ParameterError("n must be positive");

  Workload w;
  if (!a.input.empty()) {
    w.pw = deserialize(read_file(a.input));
    w.cfg = w.pw.tile;
    w.source = "file";
  } else {
    if (a.m == 0 || a.k == 0) throw ParameterError("bench needs --input or both --m and --k");
    w = synthetic_workload(a, a.bits, v);
  }
  const PackedWeights& pw = w.pw;
  check_kernel_config(pw, w.cfg, v);

  GaussianRng act_rng(a.seed + 1);
  const Matrix act = gaussian_matrix(n, pw.k_logical, act_rng);
  const TimingStats t = time_kernel(act, w, v, a);

  KernelStats stats;
  stats.track_per_output = true;
  KernelOptions opts;
  opts.threads = a.threads;
  opts.stats = &stats;
  (void)mpgemm(act, pw, w.cfg, v, opts);
  const auto [lo, hi] = std::minmax_element(stats.lookups_per_output.begin(), stats.lookups_per_output.end());
  const std::uint64_t expected = static_cast<std::uint64_t>(pw.bits) * pw.k_groups();

  const double weight_bytes = static_cast<double>(pw.payload_bytes());
  json j;
  j["schema_version"] = kBenchSchemaVersion;
  j["command"] = "bench";
  j["shape"] = {{"m", pw.m}, {"k", pw.k_logical}, {"n", n}};
  j["mode"] = a.mode;
  j["bits"] = pw.bits;
  j["g"] = pw.g;
  j["group_size"] = pw.group_size;
  j["variant"] = std::string(to_string(v));
  j["threads"] = a.threads;
  j["tile"] = tile_json(w.cfg);
  j["tile_source"] = w.source;
  j["reps"] = a.reps;
  j["warmup"] = a.warmup;
  j["latency_ns"] = {{"samples", t.samples_ns}, {"median", t.median_ns}, {"mean", t.mean_ns}, {"min", t.min_ns}};
  j["weight_bytes"] = pw.payload_bytes();
  j["weight_bytes_per_s"] = weight_bytes / (t.median_ns * 1e-9);
  j["lookups"] = {{"total", stats.lookups},
                  {"per_output_min", *lo},
                  {"per_output_max", *hi},
                  {"expected_per_output", expected},
                  {"exact", *lo == expected && *hi == expected}};
  j["lut_builds"] = stats.lut_builds;
  j["table_bytes"] = stats.table_bytes;
  j["table_bytes_unconsolidated"] = stats.table_bytes_unconsolidated;

  if (a.bit_scaling) {
    BenchArgs s = a;
    s.m = pw.m;
    s.k = pw.k_logical;
    s.g = pw.g;
    s.group_size = pw.group_size;
    s.tile_m = w.cfg.m_tile;
    s.tile_k = w.cfg.k_tile;
    json med = json::object();
    double t1 = 0, t2 = 0, t4 = 0;
    for (int bits : {1, 2, 4}) {
      const Workload wb = synthetic_workload(s, bits, v);
      const double m = time_kernel(act, wb, v, s).median_ns;
      med[std::to_string(bits)] = m;
      (bits == 1 ? t1 : bits == 2 ? t2 : t4) = m;
    }
    j["bit_scaling"] = {{"median_ns", med},
                        {"ratio_1_to_4", t1 / t4},
                        {"ratio_2_to_4", t2 / t4},
                        {"monotone", t1 <= t2 && t2 <= t4}};
  } else {
    j["bit_scaling"] = nullptr;
  }
  std::cout << j.dump(2) << "\n";
  return 0;
}

// ---- nmse ----

struct NmseArgs {
  std::size_t m = 4096, k = 4096, n = 1;
  int bits = 4;
  std::size_t group_size = 32;
  std::vector<std::string> variants;
  std::uint64_t seed = 1;
  int threads = 1;
  bool json_out = false;
};

int run_nmse(const NmseArgs& a) {
  std::vector<KernelVariant> vs;
  if (a.variants.empty()) {
    vs = {KernelVariant::scalar_real, KernelVariant::scalar_quantized, KernelVariant::vector_quantized,
          KernelVariant::vector_fast_aggregation};
  } else {
    for (const auto& s : a.variants) vs.push_back(parse_variant(s));
  }
  NmseCase c{a.m, a.k, a.n, a.bits, a.group_size, a.seed, a.threads};
  const auto rows = nmse_report(c, vs);
  json results = json::array();
  std::string text = "shape " + std::to_string(a.m) + "x" + std::to_string(a.k) + "x" + std::to_string(a.n) + ", " +
                     std::to_string(a.bits) + "-bit, group " + std::to_string(a.group_size) + ", seed " +
                     std::to_string(a.seed) + "\n";
  for (const auto& r : rows) {
    results.push_back({{"variant", r.name}, {"nmse", r.nmse}});
    char buf[128];
    std::snprintf(buf, sizeof buf, "  %-12s %.6e\n", r.name.c_str(), r.nmse);
    text += buf;
  }
  json j = {{"command", "nmse"},
            {"shape", {{"m", a.m}, {"k", a.k}, {"n", a.n}}},
            {"bits", a.bits},
            {"group_size", a.group_size},
            {"seed", a.seed},
            {"results", results}};
  emit(j, a.json_out, text);
  return 0;
}

// ---- tune ----

struct TuneArgs {
  std::size_t m = 0, k = 0;
  int bits = 4;
  int g = 4;
  std::size_t group_size = 32;
  std::string variant = "vector-q8";
  double budget_ms = 0.0;
  int runs = 5;
  int warmup = 2;
  std::size_t scratch_budget = 256 * 1024;
  int threads = 1;
  std::uint64_t seed = 1;
  std::string tune_cache;
  bool json_out = false;
};

int run_tune(const TuneArgs& a) {
  TuneOptions o;
  o.variant = parse_variant(a.variant);
  o.group_size = a.group_size;
  o.runs = a.runs;
  o.warmup = a.warmup;
  o.threads = a.threads;
  o.seed = a.seed;
  o.budget_ms = a.budget_ms;
  o.enumerate.scratch_budget = a.scratch_budget;
  o.cache_path = a.tune_cache;
  const TuneResult r = tune(a.m, a.k, a.bits, a.g, o);
  json j = {{"command", "tune"},
            {"key",
             {{"m", r.key.m},
              {"k", r.key.k},
              {"bits", r.key.bits},
              {"g", r.key.g},
              {"variant", r.key.variant},
              {"machine_id", r.key.machine_id}}},
            {"tile", tile_json(r.cfg)},
            {"throughput", r.throughput},
            {"timestamp", r.timestamp},
            {"from_cache", r.from_cache}};
  char buf[512];
  std::snprintf(buf, sizeof buf,
                "%zux%zu %d-bit g=%d %s on %s: n_tile %zu, m_tile %zu, k_tile %zu, %.4g weight bytes/s%s\n", r.key.m,
                r.key.k, r.key.bits, r.key.g, r.key.variant.c_str(), r.key.machine_id.c_str(), r.cfg.n_tile,
                r.cfg.m_tile, r.cfg.k_tile, r.throughput, r.from_cache ? " (cached)" : "");
  emit(j, a.json_out, buf);
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"bitlut: table-lookup low-bit matrix multiplication tools"};
  app.require_subcommand(1);
  const std::vector<std::string> variant_names{"scalar-real", "scalar-q8", "vector-q8", "fast-agg"};
  auto bits_check = CLI::Range(1, 4);
  auto g_check = CLI::Range(1, 8);

  GenerateArgs ga;
  auto* gen = app.add_subcommand("generate", "write a raw real matrix (Gaussian or constant)");
  gen->add_option("--rows", ga.rows)->required();
  gen->add_option("--cols", ga.cols)->required();
  gen->add_option("--fill", ga.fill)->check(CLI::IsMember({"gaussian", "const"}));
  gen->add_option("--value", ga.value);
  gen->add_option("--seed", ga.seed);
  gen->add_option("--output,-o", ga.output)->required();

  QuantizeArgs qa;
  auto* quant = app.add_subcommand("quantize", "raw real matrix -> quantized matrix");
  quant->add_option("--input,-i", qa.input)->required();
  quant->add_option("--output,-o", qa.output)->required();
  quant->add_option("--bits", qa.bits)->check(bits_check);
  quant->add_option("--group-size", qa.group_size);
  quant->add_flag("--json", qa.json_out);

  PrepackArgs pa;
  auto* pack = app.add_subcommand("prepack", "quantized matrix -> LMPW packed weights");
  pack->add_option("--input,-i", pa.input)->required();
  pack->add_option("--output,-o", pa.output)->required();
  pack->add_option("--g", pa.g)->check(g_check);
  pack->add_option("--tile-m", pa.tile_m);
  pack->add_option("--tile-k", pa.tile_k);
  pack->add_flag("--verify", pa.verify, "re-read the output and compare bit planes");
  pack->add_flag("--json", pa.json_out);

  BenchArgs ba;
  bool bench_json = true;
  auto* bench = app.add_subcommand("bench", "time a kernel variant; prints a JSON report");
  bench->add_option("--input,-i", ba.input, "LMPW file; otherwise Gaussian weights of --m x --k");
  bench->add_option("--m", ba.m);
  bench->add_option("--k", ba.k);
  bench->add_option("--bits", ba.bits)->check(bits_check);
  bench->add_option("--g", ba.g)->check(g_check);
  bench->add_option("--group-size", ba.group_size);
  bench->add_option("--tile-m", ba.tile_m);
  bench->add_option("--tile-k", ba.tile_k);
  bench->add_option("--mode", ba.mode)->check(CLI::IsMember({"gemv", "gemm"}));
  bench->add_option("--n", ba.n, "activation rows in gemm mode");
  bench->add_option("--variant", ba.variant)->check(CLI::IsMember(variant_names));
  bench->add_option("--reps", ba.reps);
  bench->add_option("--warmup", ba.warmup);
  bench->add_option("--threads", ba.threads)->check(CLI::PositiveNumber);
  bench->add_option("--seed", ba.seed);
  bench->add_option("--tune-cache", ba.tune_cache);
  bench->add_flag("--bit-scaling", ba.bit_scaling, "also time 1, 2 and 4 bits on the same shape");
  bench->add_flag("--json", bench_json, "accepted for symmetry; output is always JSON");

  NmseArgs na;
  auto* nm = app.add_subcommand("nmse", "error of each variant against the unquantized product");
  nm->add_option("--m", na.m);
  nm->add_option("--k", na.k);
  nm->add_option("--n", na.n);
  nm->add_option("--bits", na.bits)->check(bits_check);
  nm->add_option("--group-size", na.group_size);
  nm->add_option("--variant", na.variants, "repeatable; default all")->check(CLI::IsMember(variant_names));
  nm->add_option("--seed", na.seed);
  nm->add_option("--threads", na.threads)->check(CLI::PositiveNumber);
  nm->add_flag("--json", na.json_out);

  TuneArgs ta;
  auto* tn = app.add_subcommand("tune", "search tile sizes for a shape and cache the winner");
  tn->add_option("--m", ta.m)->required();
  tn->add_option("--k", ta.k)->required();
  tn->add_option("--bits", ta.bits)->check(bits_check);
  tn->add_option("--g", ta.g)->check(g_check);
  tn->add_option("--group-size", ta.group_size);
  tn->add_option("--variant", ta.variant)->check(CLI::IsMember(variant_names));
  tn->add_option("--budget-ms", ta.budget_ms);
  tn->add_option("--runs", ta.runs);
  tn->add_option("--warmup", ta.warmup);
  tn->add_option("--scratch-budget", ta.scratch_budget, "bytes of float tables per activation block");
  tn->add_option("--threads", ta.threads)->check(CLI::PositiveNumber);
  tn->add_option("--seed", ta.seed);
  tn->add_option("--tune-cache", ta.tune_cache);
  tn->add_flag("--json", ta.json_out);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::cerr << "E_USAGE: " << one_line(e.what()) << "\n";
    return 2;
  }

  try {
    if (*gen) return run_generate(ga);
    if (*quant) return run_quantize(qa);
    if (*pack) return run_prepack(pa);
    if (*bench) return run_bench(ba);
    if (*nm) return run_nmse(na);
    if (*tn) return run_tune(ta);
  } catch (const Error& e) {
    std::cerr << e.code() << ": " << one_line(e.what()) << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "E_INTERNAL: " << one_line(e.what()) << "\n";
    return 3;
  }
  return 0;
}
