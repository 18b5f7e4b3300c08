#include "bitlut/io.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

#include "byte_stream.hpp"

namespace bitlut {

namespace {

constexpr char kRawMagic[4] = {'L', 'M', 'R', 'W'};
constexpr char kQuantMagic[4] = {'L', 'M', 'Q', 'W'};

void check_magic(detail::Reader& rd, const char (&magic)[4], const char* name) {
  auto m = rd.raw(4);
  if (std::memcmp(m.data(), magic, 4) != 0) throw BadMagicError(std::string("not an ") + name + " stream (bad magic)");
}

void check_version(std::uint32_t got, std::uint32_t want, const char* name) {
  if (got != want) {
    throw VersionMismatchError(std::string(name) + " version " + std::to_string(got) + " is not supported (expected " +
                               std::to_string(want) + ")");
  }
}

void check_end(const detail::Reader& rd, const char* name) {
  if (rd.remaining() != 0) {
    throw LengthMismatchError(std::string(name) + " stream has " + std::to_string(rd.remaining()) +
                              " trailing bytes after the payload");
  }
}

// Rejects sizes whose byte count would overflow before comparing against the stream.
std::size_t checked_count(std::uint64_t a, std::uint64_t b, const char* name) {
  if (a != 0 && b > (std::uint64_t{1} << 40) / a) {
    throw LengthMismatchError(std::string(name) + " header declares an implausibly large matrix");
  }
  return static_cast<std::size_t>(a * b);
}

}  // namespace

std::vector<std::uint8_t> encode_matrix(const Matrix& m) {
  std::vector<std::uint8_t> out;
  out.reserve(24 + m.rows() * m.cols() * 4);
  out.insert(out.end(), std::begin(kRawMagic), std::end(kRawMagic));
  detail::put_u32(out, kRawMatrixVersion);
  detail::put_u64(out, m.rows());
  detail::put_u64(out, m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (float v : m.row(r)) detail::put_f32(out, v);
  }
  return out;
}

Matrix decode_matrix(std::span<const std::uint8_t> bytes) {
  detail::Reader rd(bytes, "LMRW");
  check_magic(rd, kRawMagic, "LMRW");
  check_version(rd.u32(), kRawMatrixVersion, "LMRW");
  const std::uint64_t rows = rd.u64();
  const std::uint64_t cols = rd.u64();
  const std::size_t count = checked_count(rows, cols, "LMRW");
  auto data = rd.f32s(count);
  check_end(rd, "LMRW");
  return Matrix(rows, cols, std::move(data));
}

std::vector<std::uint8_t> encode_quantized(const QuantizedWeights& qw) {
  qw.validate();
  std::vector<std::uint8_t> out;
  out.reserve(40 + qw.scales.size() * 4 + qw.qvalues.size());
  out.insert(out.end(), std::begin(kQuantMagic), std::end(kQuantMagic));
  detail::put_u32(out, kQuantizedVersion);
  detail::put_u64(out, qw.m);
  detail::put_u64(out, qw.k);
  detail::put_u32(out, static_cast<std::uint32_t>(qw.bits));
  detail::put_u64(out, qw.group_size);
  for (float s : qw.scales) detail::put_f32(out, s);
  out.insert(out.end(), qw.qvalues.begin(), qw.qvalues.end());
  return out;
}

QuantizedWeights decode_quantized(std::span<const std::uint8_t> bytes) {
  detail::Reader rd(bytes, "LMQW");
  check_magic(rd, kQuantMagic, "LMQW");
  check_version(rd.u32(), kQuantizedVersion, "LMQW");
  QuantizedWeights qw;
  qw.m = rd.u64();
  qw.k = rd.u64();
  qw.bits = static_cast<int>(rd.u32());
  qw.group_size = rd.u64();
  if (qw.bits < 1 || qw.bits > 4) throw ParameterError("LMQW header: bits out of range");
  if (qw.group_size == 0 || qw.k % qw.group_size != 0) {
    throw ParameterError("LMQW header: k is not divisible by group_size");
  }
  const std::size_t count = checked_count(qw.m, qw.k, "LMQW");
  qw.scales = rd.f32s(qw.m * qw.groups_per_row());
  auto q = rd.raw(count);
  qw.qvalues.assign(q.begin(), q.end());
  check_end(rd, "LMQW");
  qw.validate();
  return qw;
}

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "' for reading");
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) throw IoError("read error on '" + path + "'");
  return bytes;
}

void write_file_atomic(const std::string& path, std::span<const std::uint8_t> bytes) {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open '" + tmp + "' for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write error on '" + tmp + "'");
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::remove(tmp.c_str());
    throw IoError("cannot replace '" + path + "': " + ec.message());
  }
}

}  // namespace bitlut
