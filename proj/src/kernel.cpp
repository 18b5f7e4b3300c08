#include "bitlut/kernel.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstring>
#include <limits>
#include <string>

#if defined(__SSE4_1__)
#include <immintrin.h>
#define BITLUT_HAVE_SSE41 1
#endif

namespace bitlut {

namespace {

std::string str(std::size_t v) { return std::to_string(v); }

// Outputs one vector-kernel call covers; keeps its accumulators and staging near L1.
constexpr std::size_t kRunRows = 256;

bool is_vector(KernelVariant v) {
  return v == KernelVariant::vector_quantized || v == KernelVariant::vector_fast_aggregation;
}

int log2_exact(std::size_t v) {
  int d = 0;
  while ((std::size_t{1} << d) < v) ++d;
  return (std::size_t{1} << d) == v ? d : -1;
}

// Everything the per-M-block routines need, resolved once per call.
struct Plan {
  const PackedWeights* pw;
  KernelVariant variant;
  std::size_t m_tile, lanes, chunks, kgpt, upt, spb, stripe_bytes;
  std::size_t k_groups, gkg, groups;
  int bits, g, depth;
  std::vector<const std::uint8_t*> planes;

  Plan(const PackedWeights& w, KernelVariant v) : pw(&w), variant(v) {
    const auto& t = w.tile;
    m_tile = t.m_tile;
    lanes = t.lanes;
    chunks = t.m_tile / t.lanes;
    kgpt = t.k_tile / static_cast<std::size_t>(t.g);
    upt = chunks * kgpt;
    spb = slots_per_byte(t.g);
    k_groups = w.k_groups();
    stripe_bytes = chunks * k_groups / spb * lanes;
    gkg = w.group_size / static_cast<std::size_t>(w.g);
    groups = w.groups_per_row();
    bits = w.bits;
    g = w.g;
    depth = log2_exact(gkg);
    for (const auto& p : w.planes) planes.push_back(p.data());
  }

  const std::uint8_t* stripe(int plane, std::size_t mb) const {
    return planes[static_cast<std::size_t>(plane)] + mb * stripe_bytes;
  }
  std::size_t unit(std::size_t kg, std::size_t chunk) const {
    return (kg / kgpt) * upt + chunk * kgpt + kg % kgpt;
  }
  float weight_scale(std::size_t mb, std::size_t gq, std::size_t m_local) const {
    return pw->kernel_scales[(mb * groups + gq) * m_tile + m_local];
  }
};

// Tables and per-group coefficients for one block of activation rows.
struct BlockTables {
  std::size_t rows = 0;
  LookupTables real;
  LookupTables q8;
  std::vector<float> coef;   // rows x groups, 0.5 * table scale
  std::vector<float> hbias;  // rows x groups, 0.5 * activation group sum
};

struct Tracker {
  KernelStats* stats;
  std::size_t m_total;
  std::size_t row0;

  bool on() const { return stats != nullptr && stats->track_per_output; }
  void add(std::size_t row_local, std::size_t m, std::uint64_t n) const {
    stats->lookups_per_output[(row0 + row_local) * m_total + m] += n;
  }
};

std::uint64_t run_scalar_real(const Plan& p, const BlockTables& bt, std::size_t mb, Matrix& out, std::size_t row0,
                              const Tracker& tr) {
  const std::size_t m0 = mb * p.m_tile;
  std::vector<float> stage(static_cast<std::size_t>(p.bits) * p.m_tile);
  std::vector<float> acc(p.m_tile);
  std::uint64_t lookups = 0;
  for (std::size_t n = 0; n < bt.rows; ++n) {
    std::fill(stage.begin(), stage.end(), 0.0f);
    std::fill(acc.begin(), acc.end(), 0.0f);
    for (std::size_t kt = 0; kt < p.k_groups / p.kgpt; ++kt) {
      for (std::size_t c = 0; c < p.chunks; ++c) {
        std::size_t kg = kt * p.kgpt;
        const std::size_t end = kg + p.kgpt;
        while (kg < end) {
          const std::size_t seg_end = std::min(end, (kg / p.gkg + 1) * p.gkg);
          for (int i = 0; i < p.bits; ++i) {
            const auto view = plane_tile_view(*p.pw, i, mb, c, kg, seg_end - kg);
            lookup_accumulate_tile(view, bt.real, n,
                                   std::span(stage).subspan(static_cast<std::size_t>(i) * p.m_tile + c * p.lanes, p.lanes));
          }
          const std::uint64_t n_look = static_cast<std::uint64_t>(p.bits) * (seg_end - kg);
          lookups += n_look * p.lanes;
          if (tr.on()) {
            for (std::size_t l = 0; l < p.lanes; ++l) tr.add(n, m0 + c * p.lanes + l, n_look);
          }
          if (seg_end % p.gkg == 0) {
            const std::size_t gq = seg_end / p.gkg - 1;
            const float hb = bt.hbias[n * p.groups + gq];
            for (std::size_t l = 0; l < p.lanes; ++l) {
              const std::size_t ml = c * p.lanes + l;
              float combined = 0.0f;
              for (int i = 0; i < p.bits; ++i) {
                float& s = stage[static_cast<std::size_t>(i) * p.m_tile + ml];
                combined += 0.5f * static_cast<float>(1u << i) * s;
                s = 0.0f;
              }
              acc[ml] += p.weight_scale(mb, gq, ml) * (combined - hb);
            }
          }
          kg = seg_end;
        }
      }
    }
    for (std::size_t ml = 0; ml < p.m_tile; ++ml) out(row0 + n, m0 + ml) = acc[ml];
  }
  return lookups;
}

// Shared flush arithmetic of every int8 path, two fused multiply-adds; the vector
// kernels replicate it lane-wise.
inline float flush_quantized(float acc, float combined, float coef, float hb, float w) {
  return std::fma(std::fma(combined, coef, -hb), w, acc);
}

std::uint64_t run_scalar_quantized(const Plan& p, const BlockTables& bt, std::size_t mb, Matrix& out,
                                   std::size_t row0, const Tracker& tr, bool fast) {
  const std::size_t m0 = mb * p.m_tile;
  const unsigned mask = (1u << p.g) - 1u;
  std::vector<std::int32_t> stage(static_cast<std::size_t>(p.bits) * p.m_tile);
  std::vector<std::int8_t> partials(fast ? static_cast<std::size_t>(p.bits) * p.m_tile * p.gkg : 0);
  std::vector<float> acc(p.m_tile);
  const float fa_bias = fast ? static_cast<float>(fast_aggregation_bias(p.depth) * ((1 << p.bits) - 1)) : 0.0f;
  std::uint64_t lookups = 0;
  for (std::size_t n = 0; n < bt.rows; ++n) {
    std::fill(stage.begin(), stage.end(), 0);
    std::fill(acc.begin(), acc.end(), 0.0f);
    for (std::size_t kt = 0; kt < p.k_groups / p.kgpt; ++kt) {
      for (std::size_t c = 0; c < p.chunks; ++c) {
        for (std::size_t kgl = 0; kgl < p.kgpt; ++kgl) {
          const std::size_t kg = kt * p.kgpt + kgl;
          const std::size_t u = p.unit(kg, c);
          const std::size_t byte = (u / p.spb) * p.lanes;
          const unsigned shift = slot_shift(u % p.spb, p.g);
          for (int i = 0; i < p.bits; ++i) {
            const std::uint8_t* s = p.stripe(i, mb) + byte;
            for (std::size_t l = 0; l < p.lanes; ++l) {
              const unsigned idx = (s[l] >> shift) & mask;
              const int v = bt.q8.qvalue(n, kg, idx);
              const std::size_t slot = static_cast<std::size_t>(i) * p.m_tile + c * p.lanes + l;
              if (fast) {
                partials[slot * p.gkg + kg % p.gkg] = static_cast<std::int8_t>(v);
              } else {
                stage[slot] += v;
              }
            }
          }
          lookups += static_cast<std::uint64_t>(p.bits) * p.lanes;
          if (tr.on()) {
            for (std::size_t l = 0; l < p.lanes; ++l) tr.add(n, m0 + c * p.lanes + l, static_cast<std::uint64_t>(p.bits));
          }
          if (kg % p.gkg != p.gkg - 1) continue;
          const std::size_t gq = kg / p.gkg;
          const float coef = bt.coef[n * p.groups + gq];
          const float hb = bt.hbias[n * p.groups + gq];
          for (std::size_t l = 0; l < p.lanes; ++l) {
            const std::size_t ml = c * p.lanes + l;
            std::int32_t combined = 0;
            for (int i = 0; i < p.bits; ++i) {
              const std::size_t slot = static_cast<std::size_t>(i) * p.m_tile + ml;
              if (fast) {
                const int root = halving_tree(std::span(partials).subspan(slot * p.gkg, p.gkg), p.depth);
                combined += root * (1 << (i + p.depth));
              } else {
                combined += stage[slot] * (1 << i);
                stage[slot] = 0;
              }
            }
            float cf = static_cast<float>(combined);
            if (fast) cf = cf - fa_bias;
            acc[ml] = flush_quantized(acc[ml], cf, coef, hb, p.weight_scale(mb, gq, ml));
          }
        }
      }
    }
    for (std::size_t ml = 0; ml < p.m_tile; ++ml) out(row0 + n, m0 + ml) = acc[ml];
  }
  return lookups;
}

#if defined(BITLUT_HAVE_SSE41)

inline __m128 flush4(__m128 cf, __m128 coef, __m128 neg_hb, __m128 w, __m128 acc) {
#if defined(__FMA__)
  return _mm_fmadd_ps(_mm_fmadd_ps(cf, coef, neg_hb), w, acc);
#else
  alignas(16) float c[4], k[4], h[4], ww[4], a[4];
  _mm_store_ps(c, cf), _mm_store_ps(k, coef), _mm_store_ps(h, neg_hb), _mm_store_ps(ww, w), _mm_store_ps(a, acc);
  for (int i = 0; i < 4; ++i) a[i] = std::fma(std::fma(c[i], k[i], h[i]), ww[i], a[i]);
  return _mm_load_ps(a);
#endif
}

#if defined(__AVX2__)
inline __m256 flush8(__m256 cf, __m256 coef, __m256 neg_hb, __m256 w, __m256 acc) {
#if defined(__FMA__)
  return _mm256_fmadd_ps(_mm256_fmadd_ps(cf, coef, neg_hb), w, acc);
#else
  return _mm256_set_m128(flush4(_mm256_extractf128_ps(cf, 1), _mm256_extractf128_ps(coef, 1), _mm256_extractf128_ps(neg_hb, 1),
                                _mm256_extractf128_ps(w, 1), _mm256_extractf128_ps(acc, 1)),
                         flush4(_mm256_castps256_ps128(cf), _mm256_castps256_ps128(coef), _mm256_castps256_ps128(neg_hb),
                                _mm256_castps256_ps128(w), _mm256_castps256_ps128(acc)));
#endif
}
#endif

// g = 4, lanes = 16: each interleave block is 16 bytes holding two consecutive
// units of a lane chunk (low and high nibbles). Staging accumulators of one
// chunk stay in registers while its k-groups stream past.
template <int Bits, bool Fast>
std::uint64_t run_vector(const Plan& p, const BlockTables& bt, std::size_t mb, Matrix& out, std::size_t row0,
                         const Tracker& tr) {
  const std::size_t m0 = mb * p.m_tile;
  const std::size_t levels = static_cast<std::size_t>(p.depth) + 1;
  std::vector<__m128i> stage(p.chunks * Bits * 2);
  std::vector<__m128i> tree(Fast ? p.chunks * Bits * levels : 0);
  std::vector<__m128i> tables(p.kgpt);
  std::vector<float> acc(p.m_tile);

  const __m128i low4 = _mm_set1_epi8(0x0F);
  const __m128i ones = _mm_set1_epi8(1);
  const __m128i flip = _mm_set1_epi8(static_cast<char>(0x80));
  const __m128i reverse8 = _mm_setr_epi8(7, 6, 5, 4, 3, 2, 1, 0, 7, 6, 5, 4, 3, 2, 1, 0);
  const float fa_bias_s = Fast ? static_cast<float>(fast_aggregation_bias(p.depth) * ((1 << Bits) - 1)) : 0.0f;
  const int depth_shift = Fast ? p.depth : 0;
  // The bit combination fits int16 when |partial| * (2^Bits - 1) cannot exceed it.
  const bool narrow = p.gkg * 128 * ((std::size_t{1} << Bits) - 1) <= 32767;
  const std::uint8_t* stripes[Bits];
  for (int i = 0; i < Bits; ++i) stripes[i] = p.stripe(i, mb);
  std::uint64_t lookups = 0;

  for (std::size_t n = 0; n < bt.rows; ++n) {
    std::fill(stage.begin(), stage.end(), _mm_setzero_si128());
    std::fill(acc.begin(), acc.end(), 0.0f);
    for (std::size_t kt = 0; kt < p.k_groups / p.kgpt; ++kt) {
      // 16-entry tables of this tile from the stored halves: the high half is the
      // stored half reversed and negated.
      for (std::size_t kgl = 0; kgl < p.kgpt; ++kgl) {
        const std::int8_t* s = bt.q8.qentries.data() + bt.q8.offset(n, kt * p.kgpt + kgl);
        const __m128i lo = _mm_loadl_epi64(reinterpret_cast<const __m128i*>(s));
        const __m128i neg = _mm_sub_epi8(_mm_setzero_si128(), _mm_shuffle_epi8(lo, reverse8));
        tables[kgl] = _mm_unpacklo_epi64(lo, neg);
      }
      auto table = [&](std::size_t kgl) { return tables[kgl]; };
      for (std::size_t c = 0; c < p.chunks; ++c) {
        __m128i* st = stage.data() + c * Bits * 2;
        __m128i* lv_base = Fast ? tree.data() + c * Bits * levels : nullptr;
        __m128i slo[Bits], shi[Bits];
        for (int i = 0; i < Bits; ++i) {
          slo[i] = st[2 * i];
          shi[i] = st[2 * i + 1];
        }

        // Pushes one lookup result (pos = leaf index) into plane i's rounding-average tree.
        auto push = [&](int i, __m128i x, std::size_t pos, std::size_t from_level) {
          __m128i* lv = lv_base + static_cast<std::size_t>(i) * levels;
          for (std::size_t l = from_level;; ++l) {
            if ((pos >> l) & 1u) {
              x = _mm_avg_epu8(lv[l], x);
            } else {
              lv[l] = x;
              break;
            }
          }
        };
        auto single = [&](std::size_t kgl, std::size_t pos) {
          const std::size_t u = kt * p.upt + c * p.kgpt + kgl;
          for (int i = 0; i < Bits; ++i) {
            __m128i b = _mm_loadu_si128(reinterpret_cast<const __m128i*>(stripes[i] + (u >> 1) * 16));
            if (u & 1) b = _mm_srli_epi16(b, 4);
            const __m128i v = _mm_shuffle_epi8(table(kgl), _mm_and_si128(b, low4));
            if constexpr (Fast) {
              push(i, _mm_xor_si128(v, flip), pos, 0);
            } else {
              slo[i] = _mm_add_epi16(slo[i], _mm_cvtepi8_epi16(v));
              shi[i] = _mm_add_epi16(shi[i], _mm_cvtepi8_epi16(_mm_srli_si128(v, 8)));
            }
          }
        };
        // kgl is even and its unit sits in a low nibble; kgl + 1 is the high nibble.
        auto pair = [&](std::size_t kgl, std::size_t pos, const std::uint8_t* block) {
          const __m128i t0 = table(kgl);
          const __m128i t1 = table(kgl + 1);
          for (int i = 0; i < Bits; ++i) {
            const __m128i b = _mm_loadu_si128(reinterpret_cast<const __m128i*>(block + (stripes[i] - stripes[0])));
            const __m128i v0 = _mm_shuffle_epi8(t0, _mm_and_si128(b, low4));
            const __m128i v1 = _mm_shuffle_epi8(t1, _mm_and_si128(_mm_srli_epi16(b, 4), low4));
            if constexpr (Fast) {
              push(i, _mm_avg_epu8(_mm_xor_si128(v0, flip), _mm_xor_si128(v1, flip)), pos + 1, 1);
            } else {
              slo[i] = _mm_add_epi16(slo[i], _mm_maddubs_epi16(ones, _mm_unpacklo_epi8(v0, v1)));
              shi[i] = _mm_add_epi16(shi[i], _mm_maddubs_epi16(ones, _mm_unpackhi_epi8(v0, v1)));
            }
          }
        };

        const std::size_t u0 = kt * p.upt + c * p.kgpt;
        std::size_t pos = (kt * p.kgpt) % p.gkg;  // k-group position inside the quantization group
        std::size_t gq = (kt * p.kgpt) / p.gkg;
        std::size_t kgl = 0;
        while (kgl < p.kgpt) {
          const std::size_t seg = std::min(p.kgpt - kgl, p.gkg - pos);
          std::size_t j = 0;
          if (((u0 + kgl) & 1) != 0) {
            single(kgl, pos);
            j = 1;
          }
          const std::uint8_t* block = stripes[0] + ((u0 + kgl + j) >> 1) * 16;
          for (; j + 2 <= seg; j += 2, block += 16) pair(kgl + j, pos + j, block);
          if (j < seg) single(kgl + j, pos + j);
          kgl += seg;
          pos += seg;
          if (pos != p.gkg) continue;
          pos = 0;

          // Per-plane partials, rescaled by 2^i (and 2^depth for the tree roots).
          __m128i plo[Bits], phi[Bits];
          for (int i = 0; i < Bits; ++i) {
            if constexpr (Fast) {
              const __m128i root = _mm_xor_si128(lv_base[static_cast<std::size_t>(i) * levels + static_cast<std::size_t>(p.depth)], flip);
              plo[i] = _mm_cvtepi8_epi16(root);
              phi[i] = _mm_cvtepi8_epi16(_mm_srli_si128(root, 8));
            } else {
              plo[i] = slo[i];
              phi[i] = shi[i];
              slo[i] = _mm_setzero_si128();
              shi[i] = _mm_setzero_si128();
            }
          }
          __m128i c0, c1, c2, c3;
          if (narrow) {
            __m128i lo = _mm_setzero_si128(), hi = lo;
            for (int i = 0; i < Bits; ++i) {
              const __m128i count = _mm_cvtsi32_si128(i + depth_shift);
              lo = _mm_add_epi16(lo, _mm_sll_epi16(plo[i], count));
              hi = _mm_add_epi16(hi, _mm_sll_epi16(phi[i], count));
            }
            c0 = _mm_cvtepi16_epi32(lo);
            c1 = _mm_cvtepi16_epi32(_mm_srli_si128(lo, 8));
            c2 = _mm_cvtepi16_epi32(hi);
            c3 = _mm_cvtepi16_epi32(_mm_srli_si128(hi, 8));
          } else {
            c0 = c1 = c2 = c3 = _mm_setzero_si128();
            for (int i = 0; i < Bits; ++i) {
              const __m128i count = _mm_cvtsi32_si128(i + depth_shift);
              c0 = _mm_add_epi32(c0, _mm_sll_epi32(_mm_cvtepi16_epi32(plo[i]), count));
              c1 = _mm_add_epi32(c1, _mm_sll_epi32(_mm_cvtepi16_epi32(_mm_srli_si128(plo[i], 8)), count));
              c2 = _mm_add_epi32(c2, _mm_sll_epi32(_mm_cvtepi16_epi32(phi[i]), count));
              c3 = _mm_add_epi32(c3, _mm_sll_epi32(_mm_cvtepi16_epi32(_mm_srli_si128(phi[i], 8)), count));
            }
          }
          const float coef_s = bt.coef[n * p.groups + gq];
          const float hb_s = bt.hbias[n * p.groups + gq];
          const float* w = p.pw->kernel_scales.data() + (mb * p.groups + gq) * p.m_tile + c * 16;
          float* a = acc.data() + c * 16;
#if defined(__AVX2__)
          const __m256 coef = _mm256_set1_ps(coef_s);
          const __m256 neg_hb = _mm256_set1_ps(-hb_s);
          const __m256i parts[2] = {_mm256_set_m128i(c1, c0), _mm256_set_m128i(c3, c2)};
          for (int q = 0; q < 2; ++q) {
            __m256 t = _mm256_cvtepi32_ps(parts[q]);
            if constexpr (Fast) t = _mm256_sub_ps(t, _mm256_set1_ps(fa_bias_s));
            _mm256_storeu_ps(a + 8 * q, flush8(t, coef, neg_hb, _mm256_loadu_ps(w + 8 * q), _mm256_loadu_ps(a + 8 * q)));
          }
#else
          const __m128 coef = _mm_set1_ps(coef_s);
          const __m128 neg_hb = _mm_set1_ps(-hb_s);
          const __m128i parts[4] = {c0, c1, c2, c3};
          for (int q = 0; q < 4; ++q) {
            __m128 t = _mm_cvtepi32_ps(parts[q]);
            if constexpr (Fast) t = _mm_sub_ps(t, _mm_set1_ps(fa_bias_s));
            _mm_storeu_ps(a + 4 * q, flush4(t, coef, neg_hb, _mm_loadu_ps(w + 4 * q), _mm_loadu_ps(a + 4 * q)));
          }
#endif
          ++gq;
        }
        for (int i = 0; i < Bits; ++i) {
          st[2 * i] = slo[i];
          st[2 * i + 1] = shi[i];
        }
        const std::uint64_t units = p.kgpt;
        lookups += units * Bits * 16;
        if (tr.on()) {
          for (std::size_t l = 0; l < 16; ++l) tr.add(n, m0 + c * 16 + l, units * Bits);
        }
      }
    }
    for (std::size_t ml = 0; ml < p.m_tile; ++ml) out(row0 + n, m0 + ml) = acc[ml];
  }
  return lookups;
}

#if defined(__AVX2__)

// Two lane chunks per 256-bit register: the low 128 bits serve chunk c, the high
// 128 bits chunk c + 1, with the same table broadcast to both. Needs an even
// chunk count and an even number of k-groups per tile, so that every tile
// segment of a chunk starts on a low nibble.
// Runs M-blocks [mb_begin, mb_end) with the K tile loop outermost, so each tile's
// tables are expanded from their stored halves once for the whole range.
template <int Bits, bool Fast>
std::uint64_t run_vector_wide(const Plan& p, const BlockTables& bt, std::size_t mb_begin, std::size_t mb_end,
                              Matrix& out, std::size_t row0, const Tracker& tr) {
  const std::size_t levels = static_cast<std::size_t>(p.depth) + 1;
  const std::size_t pairs = p.chunks / 2;
  const std::size_t blocks = mb_end - mb_begin;
  std::vector<__m256i> stage(blocks * pairs * Bits * 2);
  std::vector<__m256i> tree(Fast ? blocks * pairs * Bits * levels : 0);
  std::vector<float> acc(blocks * p.m_tile);

  const __m256i low4 = _mm256_set1_epi8(0x0F);
  const __m256i ones = _mm256_set1_epi8(1);
  const __m256i flip = _mm256_set1_epi8(static_cast<char>(0x80));
  std::vector<__m256i> tables(p.kgpt);
  const __m128i reverse8 = _mm_setr_epi8(7, 6, 5, 4, 3, 2, 1, 0, 7, 6, 5, 4, 3, 2, 1, 0);
  // Tiles holding whole quantization groups skip the segment bookkeeping.
  const bool aligned = p.kgpt % p.gkg == 0 && p.gkg % 2 == 0;
  const float fa_bias_s = Fast ? static_cast<float>(fast_aggregation_bias(p.depth) * ((1 << Bits) - 1)) : 0.0f;
  const int depth_shift = Fast ? p.depth : 0;
  const bool narrow = p.gkg * 128 * ((std::size_t{1} << Bits) - 1) <= 32767;
  const std::size_t next_chunk = p.kgpt / 2 * 16;  // byte distance between chunk c and c + 1 in a tile
  const std::uint8_t* stripes[Bits];
  std::uint64_t lookups = 0;

  auto load2 = [&](const std::uint8_t* q) {
    return _mm256_loadu2_m128i(reinterpret_cast<const __m128i*>(q + next_chunk), reinterpret_cast<const __m128i*>(q));
  };

  for (std::size_t n = 0; n < bt.rows; ++n) {
    std::fill(stage.begin(), stage.end(), _mm256_setzero_si256());
    std::fill(acc.begin(), acc.end(), 0.0f);
    for (std::size_t kt = 0; kt < p.k_groups / p.kgpt; ++kt) {
      for (std::size_t kgl = 0; kgl < p.kgpt; ++kgl) {
        const std::int8_t* s = bt.q8.qentries.data() + bt.q8.offset(n, kt * p.kgpt + kgl);
        const __m128i lo = _mm_loadl_epi64(reinterpret_cast<const __m128i*>(s));
        const __m128i neg = _mm_sub_epi8(_mm_setzero_si128(), _mm_shuffle_epi8(lo, reverse8));
        tables[kgl] = _mm256_broadcastsi128_si256(_mm_unpacklo_epi64(lo, neg));
      }
      auto table = [&](std::size_t kgl) { return tables[kgl]; };
      for (std::size_t mb = mb_begin; mb < mb_end; ++mb) {
        const std::size_t mbl = mb - mb_begin;
        const std::size_t m0 = mb * p.m_tile;
        for (int i = 0; i < Bits; ++i) stripes[i] = p.stripe(i, mb);
        for (std::size_t cp = 0; cp < pairs; ++cp) {
          const std::size_t c = 2 * cp;
          __m256i* st = stage.data() + (mbl * pairs + cp) * Bits * 2;
          __m256i* lv_base = Fast ? tree.data() + (mbl * pairs + cp) * Bits * levels : nullptr;
          __m256i slo[Bits], shi[Bits];
          for (int i = 0; i < Bits; ++i) {
            slo[i] = st[2 * i];
            shi[i] = st[2 * i + 1];
          }
          float* a = acc.data() + mbl * p.m_tile + c * 16;
          __m256 av[4];
          for (int q = 0; q < 4; ++q) av[q] = _mm256_loadu_ps(a + 8 * q);
          auto push = [&](int i, __m256i x, std::size_t pos, std::size_t from_level) {
            __m256i* lv = lv_base + static_cast<std::size_t>(i) * levels;
            for (std::size_t l = from_level;; ++l) {
              if ((pos >> l) & 1u) {
                x = _mm256_avg_epu8(lv[l], x);
              } else {
                lv[l] = x;
                break;
              }
            }
          };
          // Low/high 16-bit halves in the same arrangement the pair sums use.
          auto widen_add = [&](int i, __m256i v) {
            slo[i] = _mm256_add_epi16(slo[i], _mm256_maddubs_epi16(ones, _mm256_unpacklo_epi8(v, _mm256_setzero_si256())));
            shi[i] = _mm256_add_epi16(shi[i], _mm256_maddubs_epi16(ones, _mm256_unpackhi_epi8(v, _mm256_setzero_si256())));
          };
          const std::size_t u0 = kt * p.upt + c * p.kgpt;
          const std::uint8_t* tile0 = stripes[0] + (u0 >> 1) * 16;

          auto single = [&](std::size_t kgl, std::size_t pos) {
            const std::size_t off = (kgl >> 1) * 16;
            for (int i = 0; i < Bits; ++i) {
              __m256i b = load2(tile0 + (stripes[i] - stripes[0]) + off);
              if (kgl & 1) b = _mm256_srli_epi16(b, 4);
              const __m256i v = _mm256_shuffle_epi8(table(kgl), _mm256_and_si256(b, low4));
              if constexpr (Fast) {
                push(i, _mm256_xor_si256(v, flip), pos, 0);
              } else {
                widen_add(i, v);
              }
            }
          };
          auto pair = [&](std::size_t kgl, std::size_t pos) {
            const __m256i t0 = table(kgl);
            const __m256i t1 = table(kgl + 1);
            const std::uint8_t* block = tile0 + (kgl >> 1) * 16;
            for (int i = 0; i < Bits; ++i) {
              const __m256i b = load2(block + (stripes[i] - stripes[0]));
              const __m256i v0 = _mm256_shuffle_epi8(t0, _mm256_and_si256(b, low4));
              const __m256i v1 = _mm256_shuffle_epi8(t1, _mm256_and_si256(_mm256_srli_epi16(b, 4), low4));
              if constexpr (Fast) {
                push(i, _mm256_avg_epu8(_mm256_xor_si256(v0, flip), _mm256_xor_si256(v1, flip)), pos + 1, 1);
              } else {
                slo[i] = _mm256_add_epi16(slo[i], _mm256_maddubs_epi16(ones, _mm256_unpacklo_epi8(v0, v1)));
                shi[i] = _mm256_add_epi16(shi[i], _mm256_maddubs_epi16(ones, _mm256_unpackhi_epi8(v0, v1)));
              }
            }
          };

          std::size_t gq = (kt * p.kgpt) / p.gkg;
          auto flush = [&] {
            // plo: lanes 0..7 of chunk c | lanes 0..7 of chunk c+1; phi: lanes 8..15 likewise.
            __m256i plo[Bits], phi[Bits];
            for (int i = 0; i < Bits; ++i) {
              if constexpr (Fast) {
                const __m256i root = _mm256_xor_si256(lv_base[static_cast<std::size_t>(i) * levels + static_cast<std::size_t>(p.depth)], flip);
                const __m256i sign = _mm256_cmpgt_epi8(_mm256_setzero_si256(), root);
                plo[i] = _mm256_unpacklo_epi8(root, sign);
                phi[i] = _mm256_unpackhi_epi8(root, sign);
              } else {
                plo[i] = slo[i];
                phi[i] = shi[i];
                slo[i] = _mm256_setzero_si256();
                shi[i] = _mm256_setzero_si256();
              }
            }
            // c[0..3]: chunk c lanes 0..7, 8..15, chunk c+1 lanes 0..7, 8..15.
            __m256i cs[4];
            if (narrow) {
              __m256i lo = _mm256_setzero_si256(), hi = lo;
              for (int i = 0; i < Bits; ++i) {
                const __m128i count = _mm_cvtsi32_si128(i + depth_shift);
                lo = _mm256_add_epi16(lo, _mm256_sll_epi16(plo[i], count));
                hi = _mm256_add_epi16(hi, _mm256_sll_epi16(phi[i], count));
              }
              cs[0] = _mm256_cvtepi16_epi32(_mm256_castsi256_si128(lo));
              cs[1] = _mm256_cvtepi16_epi32(_mm256_castsi256_si128(hi));
              cs[2] = _mm256_cvtepi16_epi32(_mm256_extracti128_si256(lo, 1));
              cs[3] = _mm256_cvtepi16_epi32(_mm256_extracti128_si256(hi, 1));
            } else {
              cs[0] = cs[1] = cs[2] = cs[3] = _mm256_setzero_si256();
              for (int i = 0; i < Bits; ++i) {
                const __m128i count = _mm_cvtsi32_si128(i + depth_shift);
                cs[0] = _mm256_add_epi32(cs[0], _mm256_sll_epi32(_mm256_cvtepi16_epi32(_mm256_castsi256_si128(plo[i])), count));
                cs[1] = _mm256_add_epi32(cs[1], _mm256_sll_epi32(_mm256_cvtepi16_epi32(_mm256_castsi256_si128(phi[i])), count));
                cs[2] = _mm256_add_epi32(cs[2], _mm256_sll_epi32(_mm256_cvtepi16_epi32(_mm256_extracti128_si256(plo[i], 1)), count));
                cs[3] = _mm256_add_epi32(cs[3], _mm256_sll_epi32(_mm256_cvtepi16_epi32(_mm256_extracti128_si256(phi[i], 1)), count));
              }
            }
            const float* w = p.pw->kernel_scales.data() + (mb * p.groups + gq) * p.m_tile + c * 16;
            const __m256 coef = _mm256_set1_ps(bt.coef[n * p.groups + gq]);
            const __m256 neg_hb = _mm256_set1_ps(-bt.hbias[n * p.groups + gq]);
            for (int q = 0; q < 4; ++q) {
              __m256 t = _mm256_cvtepi32_ps(cs[q]);
              if constexpr (Fast) t = _mm256_sub_ps(t, _mm256_set1_ps(fa_bias_s));
              av[q] = flush8(t, coef, neg_hb, _mm256_loadu_ps(w + 8 * q), av[q]);
            }
            ++gq;
          };
          if (aligned && p.gkg == 8) {
            // group 32 at g = 4, the common case: fully unrolled
            for (std::size_t g0 = 0; g0 < p.kgpt; g0 += 8) {
              pair(g0, 0);
              pair(g0 + 2, 2);
              pair(g0 + 4, 4);
              pair(g0 + 6, 6);
              flush();
            }
          } else if (aligned) {
            for (std::size_t g0 = 0; g0 < p.kgpt; g0 += p.gkg) {
              for (std::size_t j = 0; j < p.gkg; j += 2) pair(g0 + j, j);
              flush();
            }
          } else {
            std::size_t pos = (kt * p.kgpt) % p.gkg;
            std::size_t kgl = 0;
            while (kgl < p.kgpt) {
              const std::size_t seg = std::min(p.kgpt - kgl, p.gkg - pos);
              std::size_t j = 0;
              if ((kgl & 1) != 0) {
                single(kgl, pos);
                j = 1;
              }
              for (; j + 2 <= seg; j += 2) pair(kgl + j, pos + j);
              if (j < seg) single(kgl + j, pos + j);
              kgl += seg;
              pos += seg;
              if (pos != p.gkg) continue;
              pos = 0;
              flush();
            }
          }
          for (int q = 0; q < 4; ++q) _mm256_storeu_ps(a + 8 * q, av[q]);
          for (int i = 0; i < Bits; ++i) {
            st[2 * i] = slo[i];
            st[2 * i + 1] = shi[i];
          }
          const std::uint64_t units = p.kgpt;
          lookups += units * Bits * 32;
          if (tr.on()) {
            for (std::size_t l = 0; l < 32; ++l) tr.add(n, m0 + c * 16 + l, units * Bits);
          }
        }
      }
    }
    for (std::size_t ml = 0; ml < blocks * p.m_tile; ++ml) out(row0 + n, mb_begin * p.m_tile + ml) = acc[ml];
  }
  return lookups;
}

#endif

// M-blocks [mb_begin, mb_end); the narrow kernel takes them one at a time.
template <bool Fast>
std::uint64_t run_vector(const Plan& p, const BlockTables& bt, std::size_t mb_begin, std::size_t mb_end, Matrix& out,
                         std::size_t row0, const Tracker& tr) {
#if defined(__AVX2__)
  if (p.chunks % 2 == 0 && p.kgpt % 2 == 0) {
    switch (p.bits) {
      case 1: return run_vector_wide<1, Fast>(p, bt, mb_begin, mb_end, out, row0, tr);
      case 2: return run_vector_wide<2, Fast>(p, bt, mb_begin, mb_end, out, row0, tr);
      case 3: return run_vector_wide<3, Fast>(p, bt, mb_begin, mb_end, out, row0, tr);
      default: return run_vector_wide<4, Fast>(p, bt, mb_begin, mb_end, out, row0, tr);
    }
  }
#endif
  std::uint64_t lookups = 0;
  for (std::size_t mb = mb_begin; mb < mb_end; ++mb) {
    switch (p.bits) {
      case 1: lookups += run_vector<1, Fast>(p, bt, mb, out, row0, tr); break;
      case 2: lookups += run_vector<2, Fast>(p, bt, mb, out, row0, tr); break;
      case 3: lookups += run_vector<3, Fast>(p, bt, mb, out, row0, tr); break;
      default: lookups += run_vector<4, Fast>(p, bt, mb, out, row0, tr); break;
    }
  }
  return lookups;
}

#endif

BlockTables build_block_tables(const Plan& p, const Matrix& a, std::size_t r0, std::size_t rows,
                               std::size_t k_tile, int threads, KernelStats* stats) {
  const auto& pw = *p.pw;
  BlockTables bt;
  bt.rows = rows;

  Matrix blk(rows, pw.k);
  for (std::size_t n = 0; n < rows; ++n) {
    auto src = a.row(r0 + n);
    std::copy(src.begin(), src.end(), blk.row(n).begin());
  }

  auto& real = bt.real;
  real.n = rows;
  real.k_groups = p.k_groups;
  real.g = p.g;
  real.mode = TableMode::real;
  real.entries.assign(rows * p.k_groups * real.half(), 0.0f);
  const std::size_t k_blocks = pw.k / k_tile;
  const auto ug = static_cast<std::size_t>(p.g);
  const auto kb_count = static_cast<long long>(k_blocks);
#pragma omp parallel for num_threads(threads) schedule(static)
  for (long long kb = 0; kb < kb_count; ++kb) {
    const std::size_t kg0 = static_cast<std::size_t>(kb) * p.kgpt;
    for (std::size_t n = 0; n < rows; ++n) {
      auto row = blk.row(n);
      build_half_tables(row.subspan(kg0 * ug, p.kgpt * ug), p.g,
                        std::span(real.entries).subspan(real.offset(n, kg0), p.kgpt * real.half()));
    }
  }
  if (stats != nullptr) stats->lut_builds += k_blocks;

  const RowSums rs = row_sums(blk, pw.group_size);
  bt.hbias.resize(rows * p.groups);
  for (std::size_t i = 0; i < bt.hbias.size(); ++i) bt.hbias[i] = 0.5f * rs.sums[i];

  if (p.variant == KernelVariant::scalar_real) {
    if (stats != nullptr) {
      stats->table_bytes = std::max(stats->table_bytes, real.allocated_bytes());
      stats->table_bytes_unconsolidated = std::max(
          stats->table_bytes_unconsolidated, LookupTables::unconsolidated_bytes(rows, p.k_groups, p.g, TableMode::real));
    }
    return bt;
  }
  bt.q8 = quantize_tables(real, p.gkg);
  bt.real = LookupTables{};
  bt.coef.resize(rows * p.groups);
  for (std::size_t n = 0; n < rows; ++n) {
    for (std::size_t gq = 0; gq < p.groups; ++gq) {
      // An all-zero group contributes nothing; a zero coefficient also cancels the aggregation bias there.
      const auto* q = bt.q8.qentries.data() + bt.q8.offset(n, gq * p.gkg);
      const bool zero = std::all_of(q, q + p.gkg * bt.q8.half(), [](std::int8_t v) { return v == 0; });
      bt.coef[n * p.groups + gq] = zero ? 0.0f : 0.5f * bt.q8.table_scale(n, gq * p.gkg);
    }
  }
  if (stats != nullptr) {
    stats->table_bytes = std::max(stats->table_bytes, bt.q8.allocated_bytes());
    stats->table_bytes_unconsolidated = std::max(
        stats->table_bytes_unconsolidated, LookupTables::unconsolidated_bytes(rows, p.k_groups, p.g, TableMode::quantized8));
  }
  return bt;
}

}  // namespace

std::string_view to_string(KernelVariant v) {
  switch (v) {
    case KernelVariant::scalar_real: return "scalar-real";
    case KernelVariant::scalar_quantized: return "scalar-q8";
    case KernelVariant::vector_quantized: return "vector-q8";
    case KernelVariant::vector_fast_aggregation: return "fast-agg";
  }
  return "unknown";
}

KernelVariant parse_variant(std::string_view name) {
  for (auto v : {KernelVariant::scalar_real, KernelVariant::scalar_quantized, KernelVariant::vector_quantized,
                 KernelVariant::vector_fast_aggregation}) {
    if (to_string(v) == name) return v;
  }
  throw ParameterError("unknown kernel variant '" + std::string(name) + "'");
}

void check_kernel_config(const PackedWeights& pw, const TileConfig& cfg, KernelVariant variant) {
  if (pw.layout_version != kLayoutVersion) {
    throw ConfigError("packed weights use layout version " + std::to_string(pw.layout_version) + ", kernel expects " +
                      std::to_string(kLayoutVersion));
  }
  cfg.validate();
  if (cfg.m_tile != pw.tile.m_tile || cfg.k_tile != pw.tile.k_tile || cfg.g != pw.tile.g ||
      cfg.lanes != pw.tile.lanes || pw.g != cfg.g) {
    throw ConfigError("tile config does not match the packed layout (m_tile/k_tile/g/lanes)");
  }
  if (pw.planes.size() != static_cast<std::size_t>(pw.bits)) throw ConfigError("plane count does not match bits");
  if (pw.kernel_scales.size() != pw.scales.size()) throw ConfigError("packed weights lack kernel scale layout");
  if (pw.group_size % static_cast<std::size_t>(pw.g) != 0) {
    throw ConfigError("group_size=" + str(pw.group_size) + " is not a multiple of g=" + std::to_string(pw.g));
  }
  const std::size_t gkg = pw.group_size / static_cast<std::size_t>(pw.g);
  // Overflow policy: one quantization group of int8 lookups must fit the accumulator.
  if (gkg * 127 > static_cast<std::size_t>(std::numeric_limits<std::int32_t>::max())) {
    throw ConfigError("group_size/g * 127 exceeds the 32-bit accumulator");
  }
  if (is_vector(variant)) {
    if (pw.g != 4 || pw.tile.lanes != 16) throw ConfigError("vector kernels require g=4 and lanes=16");
    if (gkg * 127 > static_cast<std::size_t>(std::numeric_limits<std::int16_t>::max())) {
      throw ConfigError("group_size/g * 127 exceeds the 16-bit staging accumulator of the vector kernel");
    }
  }
  if (variant == KernelVariant::vector_fast_aggregation && log2_exact(gkg) < 0) {
    throw ConfigError("fast aggregation needs group_size/g to be a power of two, got " + str(gkg));
  }
}

Matrix mpgemm(const Matrix& a, const PackedWeights& pw, const TileConfig& cfg, KernelVariant variant,
              const KernelOptions& opts) {
  check_kernel_config(pw, cfg, variant);
  if (a.cols() != pw.k_logical) {
    throw ShapeError("activation has " + str(a.cols()) + " columns, packed weights expect " + str(pw.k_logical));
  }
  a.require_finite("activation");
  const int threads = std::max(1, opts.threads);

  const Plan plan(pw, variant);
  Matrix out(a.rows(), pw.m);
  KernelStats* stats = opts.stats;
  if (stats != nullptr && stats->track_per_output) stats->lookups_per_output.assign(a.rows() * pw.m, 0);

  const std::size_t m_blocks = pw.m / plan.m_tile;
  for (std::size_t r0 = 0; r0 < a.rows(); r0 += cfg.n_tile) {
    const std::size_t rows = std::min(cfg.n_tile, a.rows() - r0);
    const BlockTables bt = build_block_tables(plan, a, r0, rows, cfg.k_tile, threads, stats);
    const Tracker tr{stats, pw.m, r0};
    std::uint64_t lookups = 0;
    // Vector kernels take runs of M-blocks covering up to kRunRows outputs.
    const std::size_t run = is_vector(variant) && !opts.portable ? std::max<std::size_t>(1, kRunRows / plan.m_tile) : 1;
    const auto run_count = static_cast<long long>((m_blocks + run - 1) / run);
#pragma omp parallel for num_threads(threads) schedule(static) reduction(+ : lookups)
    for (long long ri = 0; ri < run_count; ++ri) {
      const std::size_t mb = static_cast<std::size_t>(ri) * run;
      const std::size_t mb_end = std::min(m_blocks, mb + run);
      switch (variant) {
        case KernelVariant::scalar_real:
          lookups += run_scalar_real(plan, bt, mb, out, r0, tr);
          break;
        case KernelVariant::scalar_quantized:
          lookups += run_scalar_quantized(plan, bt, mb, out, r0, tr, false);
          break;
        case KernelVariant::vector_quantized:
        case KernelVariant::vector_fast_aggregation: {
          const bool fast = variant == KernelVariant::vector_fast_aggregation;
#if defined(BITLUT_HAVE_SSE41)
          if (!opts.portable) {
            lookups += fast ? run_vector<true>(plan, bt, mb, mb_end, out, r0, tr)
                            : run_vector<false>(plan, bt, mb, mb_end, out, r0, tr);
            break;
          }
#endif
          lookups += run_scalar_quantized(plan, bt, mb, out, r0, tr, fast);
          break;
        }
      }
    }
    if (stats != nullptr) stats->lookups += lookups;
  }
  return out;
}

std::vector<float> mpgemv(std::span<const float> a_row, const PackedWeights& pw, const TileConfig& cfg,
                          KernelVariant variant, const KernelOptions& opts) {
  Matrix a(1, a_row.size(), std::vector<float>(a_row.begin(), a_row.end()));
  Matrix r = mpgemm(a, pw, cfg, variant, opts);
  return {r.row(0).begin(), r.row(0).end()};
}

unsigned PlaneTileView::index(std::size_t lane, std::size_t j) const {
  const std::size_t spb = slots_per_byte(g);
  const std::size_t u = first_unit + j;
  const unsigned mask = (1u << g) - 1u;
  return (stripe[(u / spb) * lanes + lane] >> slot_shift(u % spb, g)) & mask;
}

PlaneTileView plane_tile_view(const PackedWeights& pw, int plane, std::size_t m_block, std::size_t chunk,
                              std::size_t kg_begin, std::size_t kg_count) {
  const Plan p(pw, KernelVariant::scalar_real);
  if (kg_count == 0 || kg_begin / p.kgpt != (kg_begin + kg_count - 1) / p.kgpt) {
    throw ShapeError("tile view must stay inside one K tile");
  }
  PlaneTileView v;
  v.stripe = p.stripe(plane, m_block);
  v.first_unit = p.unit(kg_begin, chunk);
  v.kg_begin = kg_begin;
  v.kg_count = kg_count;
  v.lanes = p.lanes;
  v.g = p.g;
  return v;
}

void lookup_accumulate_tile(const PlaneTileView& tile, const LookupTables& lut, std::size_t row,
                            std::span<float> acc) {
  for (std::size_t l = 0; l < tile.lanes; ++l) {
    float s = acc[l];
    for (std::size_t j = 0; j < tile.kg_count; ++j) {
      s += lut.value(row, tile.kg_begin + j, tile.index(l, j));
    }
    acc[l] = s;
  }
}

std::int8_t rounding_halving_add(std::int8_t a, std::int8_t b) {
  return static_cast<std::int8_t>((static_cast<int>(a) + static_cast<int>(b) + 1) >> 1);
}

double fast_aggregation_bias(int depth) {
  if (depth <= 0) return 0.0;
  return static_cast<double>(depth) * static_cast<double>(1u << depth) / 4.0;
}

std::int8_t halving_tree(std::span<const std::int8_t> partials, int depth) {
  if (depth < 0 || partials.size() != (std::size_t{1} << depth)) {
    throw ParameterError("halving tree of depth " + std::to_string(depth) + " needs " +
                         str(std::size_t{1} << std::max(depth, 0)) + " values, got " + str(partials.size()));
  }
  std::array<std::int8_t, 256> buf{};
  std::vector<std::int8_t> heap;
  std::int8_t* level = buf.data();
  if (partials.size() > buf.size()) {
    heap.resize(partials.size());
    level = heap.data();
  }
  std::copy(partials.begin(), partials.end(), level);
  for (std::size_t width = partials.size(); width > 1; width /= 2) {
    for (std::size_t i = 0; i < width / 2; ++i) level[i] = rounding_halving_add(level[2 * i], level[2 * i + 1]);
  }
  return level[0];
}

double fast_aggregate(std::span<const std::int8_t> partials, int depth) {
  const int root = halving_tree(partials, depth);
  return static_cast<double>(root) * static_cast<double>(std::size_t{1} << depth) - fast_aggregation_bias(depth);
}

}  // namespace bitlut
