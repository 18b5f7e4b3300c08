"""End-to-end checks of the bitlut command line: error contract, file pipeline,
bench report schema and key set, tune cache round trip.

usage: cli_test.py BITLUT_BINARY SCHEMA_JSON GOLDEN_KEYS
"""

import json
import os
import struct
import subprocess
import sys
import tempfile
import unittest

import jsonschema

BIN = SCHEMA = GOLDEN = None


def run(*args, ok=True):
    p = subprocess.run([BIN, *map(str, args)], capture_output=True, text=True, timeout=300)
    if ok and p.returncode != 0:
        raise AssertionError(f"{args} failed ({p.returncode}): {p.stderr}")
    return p


def run_json(*args):
    return json.loads(run(*args).stdout)


def write(path, data):
    with open(path, "wb" if isinstance(data, bytes) else "w") as f:
        f.write(data)


def read(path, mode="r"):
    with open(path, mode) as f:
        return f.read()


def key_paths(obj, prefix=""):
    out = []
    if isinstance(obj, dict):
        for k, v in obj.items():
            out.append(prefix + k)
            out.extend(key_paths(v, prefix + k + "."))
    return out


class CliTest(unittest.TestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = self.tmp.name

    def tearDown(self):
        self.tmp.cleanup()

    def path(self, name):
        return os.path.join(self.dir, name)

    def pipeline(self, bits=4, fill="gaussian", value=0.0, rows=64, cols=128, tile_m=32, tile_k=64):
        raw, q, p = self.path("w.lmrw"), self.path("w.lmqw"), self.path("w.lmpw")
        run("generate", "--rows", rows, "--cols", cols, "--fill", fill, "--value", value, "--seed", 5, "-o", raw)
        qs = run_json("quantize", "-i", raw, "-o", q, "--bits", bits, "--json")
        ps = run_json("prepack", "-i", q, "-o", p, "--g", 4, "--tile-m", tile_m, "--tile-k", tile_k, "--verify", "--json")
        return qs, ps, p

    def assert_error(self, code, *args, rc=1):
        p = run(*args, ok=False)
        self.assertEqual(p.returncode, rc, p.stderr)
        lines = p.stderr.strip().split("\n")
        self.assertEqual(len(lines), 1, p.stderr)
        self.assertTrue(lines[0].startswith(code + ": "), p.stderr)

    # ---- error contract ----

    def test_missing_input_is_io_error(self):
        self.assert_error("E_IO", "quantize", "-i", self.path("absent"), "-o", self.path("x"))

    def test_usage_errors(self):
        self.assert_error("E_USAGE", "bench", "--m", 64, "--k", 128, "--bits", 5, rc=2)
        self.assert_error("E_USAGE", "bench", "--m", 64, "--k", 128, "--variant", "fastest", rc=2)
        self.assert_error("E_USAGE", "prepack", "--g", 9, rc=2)
        self.assert_error("E_USAGE", rc=2)

    def test_format_errors(self):
        _, _, packed = self.pipeline()
        data = read(packed, "rb")

        junk = self.path("junk")
        write(junk, b"nope" + data[4:])
        self.assert_error("E_FORMAT_MAGIC", "bench", "-i", junk)

        ver = self.path("ver")
        write(ver, data[:4] + struct.pack("<I", 99) + data[8:])
        self.assert_error("E_FORMAT_VERSION", "bench", "-i", ver)

        short = self.path("short")
        write(short, data[: len(data) - 10])
        self.assert_error("E_FORMAT_TRUNCATED", "bench", "-i", short)

        long = self.path("long")
        write(long, data + b"\0")
        self.assert_error("E_FORMAT_LENGTH", "bench", "-i", long)

    def test_shape_and_layout_errors(self):
        raw, q = self.path("r"), self.path("q")
        run("generate", "--rows", 64, "--cols", 128, "-o", raw)
        self.assert_error("E_SHAPE", "quantize", "-i", raw, "-o", q, "--group-size", 48)
        run("quantize", "-i", raw, "-o", q)
        self.assert_error("E_LAYOUT", "prepack", "-i", q, "-o", self.path("p"), "--tile-m", 48)

    def test_corrupt_tune_cache(self):
        cache = self.path("cache.txt")
        write(cache, "something else\n")
        self.assert_error("E_FORMAT_MAGIC", "tune", "--m", 64, "--k", 128, "--tune-cache", cache)
        write(cache, "bitlut-tune-cache 7\n")
        self.assert_error("E_FORMAT_VERSION", "tune", "--m", 64, "--k", 128, "--tune-cache", cache)

    # ---- pipeline ----

    def test_constant_matrix_quantizes_exactly(self):
        qs, ps, _ = self.pipeline(fill="const", value=0.75)
        self.assertEqual(qs["max_abs_error"], 0.0)
        self.assertTrue(ps["verified"])

    def test_zero_matrix(self):
        qs, ps, packed = self.pipeline(fill="const", value=0.0)
        self.assertEqual(qs["max_abs_error"], 0.0)
        self.assertTrue(ps["verified"])
        rep = run_json("bench", "-i", packed, "--reps", 1)
        self.assertTrue(rep["lookups"]["exact"])

    def test_payload_scales_with_bits(self):
        sizes = {b: self.pipeline(bits=b)[1]["payload_bytes"] for b in (1, 2, 4)}
        self.assertEqual(sizes[4], 4 * sizes[1])
        self.assertEqual(sizes[2], 2 * sizes[1])
        # one bit per weight
        self.assertEqual(sizes[1], 64 * 128 // 8)

    def test_prepack_summary_consistent(self):
        _, ps, packed = self.pipeline(bits=3)
        self.assertEqual(ps["file_bytes"], os.path.getsize(packed))
        self.assertEqual(ps["payload_bytes"], ps["planes"] * ps["plane_bytes"])
        self.assertEqual(ps["tiles"], ps["m_blocks"] * ps["k_blocks"])

    def test_nmse_ordering(self):
        rep = run_json("nmse", "--m", 256, "--k", 512, "--json")
        by = {r["variant"]: r["nmse"] for r in rep["results"]}
        self.assertEqual(by["vector-q8"], by["scalar-q8"])
        self.assertGreaterEqual(by["fast-agg"], by["vector-q8"])
        self.assertAlmostEqual(by["scalar-real"], by["reference"], delta=1e-6)

    # ---- bench report ----

    def test_bench_report_schema_and_keys(self):
        schema = json.loads(read(SCHEMA))
        golden = [l.strip() for l in read(GOLDEN).splitlines() if l.strip()]
        _, _, packed = self.pipeline()
        plain = run_json("bench", "-i", packed, "--reps", 3)
        scaling = run_json("bench", "--m", 128, "--k", 256, "--reps", 2, "--bit-scaling")
        gemm = run_json("bench", "--m", 64, "--k", 128, "--mode", "gemm", "--n", 3, "--reps", 2)
        for rep in (plain, scaling, gemm):
            jsonschema.validate(rep, schema)
        self.assertEqual(key_paths(scaling), golden)
        self.assertEqual(key_paths(plain), [k for k in golden if not k.startswith("bit_scaling.")])
        self.assertIsNone(plain["bit_scaling"])
        self.assertEqual(plain["tile_source"], "file")
        self.assertEqual(gemm["shape"]["n"], 3)

    def test_bench_reps_one(self):
        rep = run_json("bench", "--m", 64, "--k", 128, "--reps", 1, "--warmup", 0)
        self.assertEqual(len(rep["latency_ns"]["samples"]), 1)
        self.assertEqual(rep["latency_ns"]["median"], rep["latency_ns"]["samples"][0])

    def test_bench_lookup_counts(self):
        rep = run_json("bench", "--m", 64, "--k", 128, "--bits", 3, "--reps", 1)
        self.assertEqual(rep["lookups"]["expected_per_output"], 3 * 128 // 4)
        self.assertTrue(rep["lookups"]["exact"])
        self.assertEqual(rep["table_bytes"] * 2, rep["table_bytes_unconsolidated"])

    # ---- tuning ----

    def test_tune_cache_round_trip(self):
        cache = self.path("cache.txt")
        first = run_json("tune", "--m", 64, "--k", 128, "--bits", 2, "--tune-cache", cache, "--json")
        self.assertFalse(first["from_cache"])
        lines = read(cache).splitlines()
        self.assertEqual(lines[0], "bitlut-tune-cache 1")
        self.assertEqual(len(lines), 2)
        second = run_json("tune", "--m", 64, "--k", 128, "--bits", 2, "--tune-cache", cache, "--json")
        self.assertTrue(second["from_cache"])
        self.assertEqual(second["tile"], first["tile"])
        rep = run_json("bench", "--m", 64, "--k", 128, "--bits", 2, "--reps", 1, "--tune-cache", cache)
        self.assertEqual(rep["tile_source"], "tune-cache")
        self.assertEqual(rep["tile"], first["tile"])
        # a different bit width is a different key
        other = run_json("bench", "--m", 64, "--k", 128, "--bits", 4, "--reps", 1, "--tune-cache", cache)
        self.assertEqual(other["tile_source"], "default")


if __name__ == "__main__":
    BIN, SCHEMA, GOLDEN = sys.argv[1:4]
    unittest.main(argv=[sys.argv[0], "-v"])
