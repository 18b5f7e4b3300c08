#include "bitlut/lut_build.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#if defined(__AVX2__)
#include <immintrin.h>
#endif

namespace bitlut {

namespace {

void check_g(int g) {
  if (g < 1 || g > 8) throw ParameterError("g must be in [1,8], got " + std::to_string(g));
}

std::int8_t quantize_entry(float v, float scale) {
  // Round half away from zero; same result as std::round without the libm call.
  const float x = v / scale;
  const float r = std::trunc(x);
  const float step = std::fabs(x - r) >= 0.5f ? 1.0f : 0.0f;
  return static_cast<std::int8_t>(std::clamp(r + std::copysign(step, x), -127.0f, 127.0f));
}

void quantize_span(const float* e, std::size_t len, float scale, std::int8_t* out) {
  std::size_t i = 0;
#if defined(__AVX2__)
  // quantize_entry, eight at a time.
  const __m256 s = _mm256_set1_ps(scale);
  const __m256 sign = _mm256_set1_ps(-0.0f);
  const __m256 half = _mm256_set1_ps(0.5f);
  const __m256 one = _mm256_set1_ps(1.0f);
  const __m256 lim = _mm256_set1_ps(127.0f);
  for (; i + 8 <= len; i += 8) {
    const __m256 x = _mm256_div_ps(_mm256_loadu_ps(e + i), s);
    const __m256 r = _mm256_round_ps(x, _MM_FROUND_TO_ZERO | _MM_FROUND_NO_EXC);
    const __m256 frac = _mm256_andnot_ps(sign, _mm256_sub_ps(x, r));
    const __m256 step = _mm256_and_ps(_mm256_cmp_ps(frac, half, _CMP_GE_OQ), one);
    __m256 q = _mm256_add_ps(r, _mm256_or_ps(step, _mm256_and_ps(x, sign)));
    q = _mm256_max_ps(_mm256_min_ps(q, lim), _mm256_sub_ps(_mm256_setzero_ps(), lim));
    const __m256i v = _mm256_cvttps_epi32(q);
    const __m128i w = _mm_packs_epi32(_mm256_castsi256_si128(v), _mm256_extracti128_si256(v, 1));
    _mm_storel_epi64(reinterpret_cast<__m128i*>(out + i), _mm_packs_epi16(w, w));
  }
#endif
  for (; i < len; ++i) out[i] = quantize_entry(e[i], scale);
}

}  // namespace

float LookupTables::value(std::size_t row, std::size_t kg, unsigned idx) const {
  const std::size_t h = half();
  const bool mirrored = idx >= h;
  const unsigned stored = mirrored ? (static_cast<unsigned>(2 * h - 1) ^ idx) : idx;
  if (mode == TableMode::real) {
    const float v = entries[offset(row, kg) + stored];
    return mirrored ? -v : v;
  }
  const float v = static_cast<float>(qentries[offset(row, kg) + stored]) * table_scale(row, kg);
  return mirrored ? -v : v;
}

int LookupTables::qvalue(std::size_t row, std::size_t kg, unsigned idx) const {
  const std::size_t h = half();
  const bool mirrored = idx >= h;
  const unsigned stored = mirrored ? (static_cast<unsigned>(2 * h - 1) ^ idx) : idx;
  const int v = qentries[offset(row, kg) + stored];
  return mirrored ? -v : v;
}

std::size_t LookupTables::allocated_bytes() const {
  return mode == TableMode::real ? entries.size() * sizeof(float) : qentries.size() * sizeof(std::int8_t);
}

std::size_t LookupTables::unconsolidated_bytes(std::size_t n, std::size_t k_groups, int g, TableMode mode) {
  const std::size_t entry = mode == TableMode::real ? sizeof(float) : sizeof(std::int8_t);
  return n * k_groups * (std::size_t{1} << g) * entry;
}

FullTables precompute_lut(std::span<const float> a_row, int g) {
  check_g(g);
  const auto ug = static_cast<std::size_t>(g);
  if (a_row.size() % ug != 0) {
    throw ShapeError("activation length " + std::to_string(a_row.size()) + " is not divisible by g=" +
                     std::to_string(g));
  }
  require_finite(a_row, "activation");
  FullTables t;
  t.g = g;
  t.k_groups = a_row.size() / ug;
  t.entries.assign(t.k_groups * t.width(), 0.0f);
  for (std::size_t kg = 0; kg < t.k_groups; ++kg) {
    for (unsigned idx = 0; idx < t.width(); ++idx) {
      float acc = 0.0f;
      for (std::size_t j = 0; j < ug; ++j) {
        const float a = a_row[kg * ug + j];
        acc = (j == 0) ? ((idx & 1u) ? a : -a) : ((idx >> j) & 1u ? acc + a : acc - a);
      }
      t.entries[kg * t.width() + idx] = acc;
    }
  }
  return t;
}

void build_half_table(std::span<const float> group, std::span<float> out) {
  const std::size_t g = group.size();
  // Level j holds 2^(j+1) sums over the first j+1 activations; the top activation
  // always enters with a minus sign in the stored half.
  if (g == 1) {
    out[0] = -group[0];
    return;
  }
  out[0] = -group[0];
  out[1] = group[0];
  std::size_t width = 2;
  for (std::size_t j = 1; j + 1 < g; ++j) {
    const float a = group[j];
    for (std::size_t i = 0; i < width; ++i) {
      const float base = out[i];
      out[i] = base - a;
      out[i + width] = base + a;
    }
    width *= 2;
  }
  const float top = group[g - 1];
  for (std::size_t i = 0; i < width; ++i) out[i] -= top;
}

#if defined(__AVX2__)
namespace {

// 8 k-groups at once for g = 4, one k-group per lane, then an 8x8 transpose so
// each k-group's 8 entries land contiguously. Same operations as build_half_table.
void build_half_tables4_x8(const float* a, float* out) {
  const __m256i idx = _mm256_setr_epi32(0, 4, 8, 12, 16, 20, 24, 28);
  const __m256 a0 = _mm256_i32gather_ps(a, idx, 4);
  const __m256 a1 = _mm256_i32gather_ps(a + 1, idx, 4);
  const __m256 a2 = _mm256_i32gather_ps(a + 2, idx, 4);
  const __m256 a3 = _mm256_i32gather_ps(a + 3, idx, 4);
  const __m256 l0 = _mm256_xor_ps(a0, _mm256_set1_ps(-0.0f));
  const __m256 b0 = _mm256_sub_ps(l0, a1), b1 = _mm256_sub_ps(a0, a1);
  const __m256 b2 = _mm256_add_ps(l0, a1), b3 = _mm256_add_ps(a0, a1);
  __m256 e[8] = {_mm256_sub_ps(b0, a2), _mm256_sub_ps(b1, a2), _mm256_sub_ps(b2, a2), _mm256_sub_ps(b3, a2),
                 _mm256_add_ps(b0, a2), _mm256_add_ps(b1, a2), _mm256_add_ps(b2, a2), _mm256_add_ps(b3, a2)};
  for (auto& v : e) v = _mm256_sub_ps(v, a3);

  const __m256 t0 = _mm256_unpacklo_ps(e[0], e[1]), t1 = _mm256_unpackhi_ps(e[0], e[1]);
  const __m256 t2 = _mm256_unpacklo_ps(e[2], e[3]), t3 = _mm256_unpackhi_ps(e[2], e[3]);
  const __m256 t4 = _mm256_unpacklo_ps(e[4], e[5]), t5 = _mm256_unpackhi_ps(e[4], e[5]);
  const __m256 t6 = _mm256_unpacklo_ps(e[6], e[7]), t7 = _mm256_unpackhi_ps(e[6], e[7]);
  const __m256 u0 = _mm256_shuffle_ps(t0, t2, 0x44), u1 = _mm256_shuffle_ps(t0, t2, 0xEE);
  const __m256 u2 = _mm256_shuffle_ps(t1, t3, 0x44), u3 = _mm256_shuffle_ps(t1, t3, 0xEE);
  const __m256 u4 = _mm256_shuffle_ps(t4, t6, 0x44), u5 = _mm256_shuffle_ps(t4, t6, 0xEE);
  const __m256 u6 = _mm256_shuffle_ps(t5, t7, 0x44), u7 = _mm256_shuffle_ps(t5, t7, 0xEE);
  _mm256_storeu_ps(out + 0, _mm256_permute2f128_ps(u0, u4, 0x20));
  _mm256_storeu_ps(out + 8, _mm256_permute2f128_ps(u1, u5, 0x20));
  _mm256_storeu_ps(out + 16, _mm256_permute2f128_ps(u2, u6, 0x20));
  _mm256_storeu_ps(out + 24, _mm256_permute2f128_ps(u3, u7, 0x20));
  _mm256_storeu_ps(out + 32, _mm256_permute2f128_ps(u0, u4, 0x31));
  _mm256_storeu_ps(out + 40, _mm256_permute2f128_ps(u1, u5, 0x31));
  _mm256_storeu_ps(out + 48, _mm256_permute2f128_ps(u2, u6, 0x31));
  _mm256_storeu_ps(out + 56, _mm256_permute2f128_ps(u3, u7, 0x31));
}

}  // namespace
#endif

void build_half_tables(std::span<const float> row, int g, std::span<float> out) {
  check_g(g);
  const auto ug = static_cast<std::size_t>(g);
  const std::size_t half = std::size_t{1} << (g - 1);
  const std::size_t k_groups = row.size() / ug;
  if (row.size() % ug != 0 || out.size() < k_groups * half) {
    throw ShapeError("build_half_tables: row of " + std::to_string(row.size()) + " for g=" + std::to_string(g) +
                     " needs " + std::to_string(k_groups * half) + " outputs, got " + std::to_string(out.size()));
  }
  std::size_t kg = 0;
#if defined(__AVX2__)
  if (g == 4) {
    for (; kg + 8 <= k_groups; kg += 8) build_half_tables4_x8(row.data() + kg * 4, out.data() + kg * 8);
  }
#endif
  for (; kg < k_groups; ++kg) build_half_table(row.subspan(kg * ug, ug), out.subspan(kg * half, half));
}

LookupTables build_tables(const Matrix& a, int g) {
  check_g(g);
  const auto ug = static_cast<std::size_t>(g);
  if (a.cols() % ug != 0) {
    throw ShapeError("activation length " + std::to_string(a.cols()) + " is not divisible by g=" + std::to_string(g));
  }
  LookupTables lut;
  lut.n = a.rows();
  lut.k_groups = a.cols() / ug;
  lut.g = g;
  lut.mode = TableMode::real;
  lut.entries.assign(lut.n * lut.k_groups * lut.half(), 0.0f);
  for (std::size_t r = 0; r < lut.n; ++r) {
    auto row = a.row(r);
    require_finite(row, "activation");
    build_half_tables(row.first(lut.k_groups * ug), g, std::span(lut.entries).subspan(lut.offset(r, 0)));
  }
  return lut;
}

LookupTables mirror_consolidate(const FullTables& full) {
  LookupTables lut;
  lut.n = 1;
  lut.k_groups = full.k_groups;
  lut.g = full.g;
  lut.mode = TableMode::real;
  lut.entries.resize(lut.k_groups * lut.half());
  for (std::size_t kg = 0; kg < full.k_groups; ++kg) {
    for (std::size_t idx = 0; idx < lut.half(); ++idx) {
      lut.entries[kg * lut.half() + idx] = full.at(kg, static_cast<unsigned>(idx));
    }
  }
  return lut;
}

FullTables reconstruct_full(const LookupTables& lut, std::size_t row) {
  FullTables full;
  full.k_groups = lut.k_groups;
  full.g = lut.g;
  full.entries.resize(full.k_groups * full.width());
  for (std::size_t kg = 0; kg < full.k_groups; ++kg) {
    for (unsigned idx = 0; idx < full.width(); ++idx) full.entries[kg * full.width() + idx] = lut.value(row, kg, idx);
  }
  return full;
}

LookupTables quantize_tables(const LookupTables& lut, std::size_t tables_per_scale) {
  if (lut.mode != TableMode::real) throw ParameterError("quantize_tables expects real-mode tables");
  if (tables_per_scale == 0 || lut.k_groups % tables_per_scale != 0) {
    throw ParameterError("tables_per_scale=" + std::to_string(tables_per_scale) + " does not divide k_groups=" +
                         std::to_string(lut.k_groups));
  }
  LookupTables q;
  q.n = lut.n;
  q.k_groups = lut.k_groups;
  q.g = lut.g;
  q.mode = TableMode::quantized8;
  q.tables_per_scale = tables_per_scale;
  q.qentries.resize(lut.entries.size());
  q.table_scales.resize(q.n * q.scale_groups());
  const std::size_t span_len = tables_per_scale * lut.half();
  const std::size_t spans = q.n * q.scale_groups();
  // Raw pointers: int8 stores would otherwise alias every other access.
  const float* src = lut.entries.data();
  std::int8_t* dst = q.qentries.data();
  float* scales = q.table_scales.data();
  for (std::size_t sp = 0; sp < spans; ++sp) {
    const float* e = src + sp * span_len;
    float peak = 0.0f;
#pragma omp simd reduction(max : peak)
    for (std::size_t i = 0; i < span_len; ++i) {
      const float v = std::fabs(e[i]);
      peak = v > peak ? v : peak;
    }
    const float scale = peak == 0.0f ? 1.0f : peak / 127.0f;
    scales[sp] = scale;
    quantize_span(e, span_len, scale, dst + sp * span_len);
  }
  return q;
}

RowSums row_sums(const Matrix& a, std::size_t group_size) {
  if (group_size == 0 || a.cols() % group_size != 0) {
    throw ShapeError("activation length " + std::to_string(a.cols()) + " is not divisible by group_size=" +
                     std::to_string(group_size));
  }
  RowSums rs;
  rs.n = a.rows();
  rs.groups = a.cols() / group_size;
  rs.sums.assign(rs.n * rs.groups, 0.0f);
  for (std::size_t r = 0; r < rs.n; ++r) {
    auto row = a.row(r);
    for (std::size_t gi = 0; gi < rs.groups; ++gi) {
      float acc = 0.0f;
      for (std::size_t j = 0; j < group_size; ++j) acc += row[gi * group_size + j];
      rs.sums[r * rs.groups + gi] = acc;
    }
  }
  return rs;
}

}  // namespace bitlut
