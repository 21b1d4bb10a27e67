// Copyright 2026 The shardsim Authors
// SPDX-License-Identifier: Apache-2.0

// AVX2 variants. This translation unit is compiled with -mavx2 and must not
// be called unless the CPU reports AVX2 support.

#include <immintrin.h>

#include <cmath>
#include <cstdint>
#include <limits>

#include "shardsim/kernels.hpp"

namespace shardsim::kernels {
namespace {

// Rounds |x| to the nearest multiple of 2^(e - S) by adding and subtracting
// 2^(e - S + 52); the addition rounds to nearest-even in hardware.
std::size_t quantize_avx2(const double* in, double* out, std::size_t n,
                          const QuantizeParams& p) {
  if (!p.subnormals) return detail::scalar_table().quantize(in, out, n, p);

  const __m256i abs_mask = _mm256_set1_epi64x(0x7fffffffffffffffLL);
  const __m256d sign_mask =
      _mm256_castsi256_pd(_mm256_set1_epi64x(static_cast<long long>(0x8000000000000000ULL)));
  const __m256i bias = _mm256_set1_epi64x(1023);
  const __m256i emin = _mm256_set1_epi64x(p.min_exponent);
  const __m256i emax1 = _mm256_set1_epi64x(p.max_exponent + 1);
  const __m256i k_offset = _mm256_set1_epi64x(1023 + 52 - p.significand_bits);
  const __m256d max_v = _mm256_set1_pd(p.max_finite);
  const __m256d inf_v = _mm256_set1_pd(std::numeric_limits<double>::infinity());
  const __m256d overflow_v =
      (p.saturate || !p.has_inf_nan) ? max_v : inf_v;
  const __m256d zero = _mm256_setzero_pd();

  std::size_t nans = 0;
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d x = _mm256_loadu_pd(in + i);
    const __m256i abs_bits = _mm256_and_si256(_mm256_castpd_si256(x), abs_mask);
    const __m256d a = _mm256_castsi256_pd(abs_bits);

    __m256i e = _mm256_sub_epi64(_mm256_srli_epi64(abs_bits, 52), bias);
    e = _mm256_blendv_epi8(e, emin, _mm256_cmpgt_epi64(emin, e));
    e = _mm256_blendv_epi8(e, emax1, _mm256_cmpgt_epi64(e, emax1));
    const __m256d k = _mm256_castsi256_pd(
        _mm256_slli_epi64(_mm256_add_epi64(e, k_offset), 52));

    __m256d r = _mm256_sub_pd(_mm256_add_pd(a, k), k);
    r = _mm256_blendv_pd(r, overflow_v, _mm256_cmp_pd(r, max_v, _CMP_GT_OQ));
    if (p.has_inf_nan) {
      r = _mm256_blendv_pd(r, inf_v, _mm256_cmp_pd(a, inf_v, _CMP_EQ_OQ));
    }
    if (p.is_signed) {
      r = _mm256_or_pd(r, _mm256_and_pd(x, sign_mask));
    } else {
      r = _mm256_blendv_pd(r, zero, x);
    }
    const __m256d nan_mask = _mm256_cmp_pd(x, x, _CMP_UNORD_Q);
    r = _mm256_blendv_pd(r, x, nan_mask);
    nans += static_cast<std::size_t>(
        __builtin_popcount(static_cast<unsigned>(_mm256_movemask_pd(nan_mask))));
    _mm256_storeu_pd(out + i, r);
  }
  for (; i < n; ++i) out[i] = quantize_one(in[i], p, nans);
  return nans;
}

void axpy_avx2(double alpha, const double* x, double* y, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    const __m256d prod = _mm256_mul_pd(va, _mm256_loadu_pd(x + i));
    _mm256_storeu_pd(y + i, _mm256_add_pd(_mm256_loadu_pd(y + i), prod));
  }
  for (; i < n; ++i) y[i] += alpha * x[i];
}

void scale_avx2(double alpha, const double* x, double* out, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(out + i, _mm256_mul_pd(va, _mm256_loadu_pd(x + i)));
  }
  for (; i < n; ++i) out[i] = alpha * x[i];
}

void divide_avx2(double alpha, const double* x, double* out, std::size_t n) {
  const __m256d va = _mm256_set1_pd(alpha);
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(out + i, _mm256_div_pd(_mm256_loadu_pd(x + i), va));
  }
  for (; i < n; ++i) out[i] = x[i] / alpha;
}

template <typename VecOp, typename ScalarOp>
void binary_avx2(const double* a, const double* b, double* out, std::size_t n,
                 VecOp vop, ScalarOp sop) {
  std::size_t i = 0;
  for (; i + 4 <= n; i += 4) {
    _mm256_storeu_pd(out + i,
                     vop(_mm256_loadu_pd(a + i), _mm256_loadu_pd(b + i)));
  }
  for (; i < n; ++i) out[i] = sop(a[i], b[i]);
}

void add_avx2(const double* a, const double* b, double* out, std::size_t n) {
  binary_avx2(a, b, out, n, [](__m256d u, __m256d v) { return _mm256_add_pd(u, v); },
              [](double u, double v) { return u + v; });
}

void sub_avx2(const double* a, const double* b, double* out, std::size_t n) {
  binary_avx2(a, b, out, n, [](__m256d u, __m256d v) { return _mm256_sub_pd(u, v); },
              [](double u, double v) { return u - v; });
}

void mul_avx2(const double* a, const double* b, double* out, std::size_t n) {
  binary_avx2(a, b, out, n, [](__m256d u, __m256d v) { return _mm256_mul_pd(u, v); },
              [](double u, double v) { return u * v; });
}

}  // namespace

namespace detail {

const KernelTable* avx2_table() {
  static const KernelTable t{Isa::kAvx2, "avx2",  quantize_avx2, axpy_avx2,
                             scale_avx2, divide_avx2, add_avx2,  sub_avx2,
                             mul_avx2};
  return &t;
}

}  // namespace detail
}  // namespace shardsim::kernels
