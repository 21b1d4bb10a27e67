// Copyright 2026 The shardsim Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <limits>

#include "shardsim/kernels.hpp"

namespace shardsim::kernels {

double quantize_one(double x, const QuantizeParams& p, std::size_t& nan_count) {
  if (std::isnan(x)) {
    ++nan_count;
    return x;
  }
  const bool negative = std::signbit(x);
  if (negative && !p.is_signed) return 0.0;
  const double a = std::fabs(x);
  if (std::isinf(a)) {
    if (p.has_inf_nan) return x;
    return negative ? -p.max_finite : p.max_finite;
  }
  if (a == 0.0) return x;

  int e = std::ilogb(a);
  e = std::clamp(e, p.min_exponent, p.max_exponent + 1);
  const double quantum = std::ldexp(1.0, e - p.significand_bits);
  double r = std::nearbyint(a / quantum) * quantum;
  if (!p.subnormals && r < p.min_normal) {
    r = (a > 0.5 * p.min_normal) ? p.min_normal : 0.0;
  }
  if (r > p.max_finite) {
    r = (p.saturate || !p.has_inf_nan)
            ? p.max_finite
            : std::numeric_limits<double>::infinity();
  }
  return negative ? -r : r;
}

namespace {

std::size_t quantize_scalar(const double* in, double* out, std::size_t n,
                            const QuantizeParams& p) {
  std::size_t nans = 0;
  for (std::size_t i = 0; i < n; ++i) out[i] = quantize_one(in[i], p, nans);
  return nans;
}

void axpy_scalar(double alpha, const double* x, double* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

void scale_scalar(double alpha, const double* x, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = alpha * x[i];
}

void divide_scalar(double alpha, const double* x, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = x[i] / alpha;
}

void add_scalar(const double* a, const double* b, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
}

void sub_scalar(const double* a, const double* b, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] - b[i];
}

void mul_scalar(const double* a, const double* b, double* out, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
}

}  // namespace

namespace detail {

const KernelTable& scalar_table() {
  static const KernelTable t{Isa::kScalar, "scalar", quantize_scalar,
                             axpy_scalar, scale_scalar,  divide_scalar,
                             add_scalar,  sub_scalar,    mul_scalar};
  return t;
}

}  // namespace detail
}  // namespace shardsim::kernels
