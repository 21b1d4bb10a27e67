// Copyright 2026 The shardsim Authors
// SPDX-License-Identifier: Apache-2.0

#include "shardsim/lowp.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace shardsim::lowp {

void FloatFormatSpec::validate() const {
  if (sign_bits != 0 && sign_bits != 1) {
    throw std::invalid_argument(name + ": sign_bits must be 0 or 1");
  }
  if (exponent_bits < 2 || exponent_bits > 8) {
    throw std::invalid_argument(name + ": exponent_bits must be in [2, 8]");
  }
  if (significand_bits < 1 || significand_bits > 23) {
    throw std::invalid_argument(name + ": significand_bits must be in [1, 23]");
  }
  if (!reserves_inf_nan && overflow_policy == OverflowPolicy::kToInfinity) {
    throw std::invalid_argument(
        name + ": overflow to infinity needs a reserved inf/NaN encoding");
  }
  if (max_exponent() < min_exponent()) {
    throw std::invalid_argument(name + ": empty exponent range");
  }
  if (min_exponent() - significand_bits < -1000 || max_exponent() > 1000) {
    throw std::invalid_argument(name + ": bias outside the emulated range");
  }
}

int FloatFormatSpec::max_exponent() const {
  const int top_code = (1 << exponent_bits) - 1;
  return (reserves_inf_nan ? top_code - 1 : top_code) - bias;
}

kernels::QuantizeParams FloatFormatSpec::params() const {
  kernels::QuantizeParams p;
  p.min_exponent = min_exponent();
  p.max_exponent = max_exponent();
  p.significand_bits = significand_bits;
  p.max_finite = max_finite(*this);
  p.min_normal = min_normal(*this);
  p.is_signed = sign_bits == 1;
  p.has_inf_nan = reserves_inf_nan;
  p.saturate = overflow_policy == OverflowPolicy::kClampToMax;
  p.subnormals = supports_subnormals;
  return p;
}

const FloatFormatSpec& fp16() {
  static const FloatFormatSpec f{"fp16", 1, 5, 10, 15, true, true,
                                 OverflowPolicy::kToInfinity};
  return f;
}

const FloatFormatSpec& m169() {
  static const FloatFormatSpec f{"1-6-9", 1, 6, 9, 59, true, true,
                                 OverflowPolicy::kToInfinity};
  return f;
}

const FloatFormatSpec& u0610() {
  static const FloatFormatSpec f{"0-6-10", 0, 6, 10, 60, true, true,
                                 OverflowPolicy::kToInfinity};
  return f;
}

std::optional<FloatFormatSpec> format_by_name(std::string_view name) {
  if (name == "fp16" || name == "1-5-10") return fp16();
  if (name == "m169" || name == "1-6-9") return m169();
  if (name == "u0610" || name == "0-6-10") return u0610();
  return std::nullopt;
}

double max_finite(const FloatFormatSpec& fmt) {
  return std::ldexp(2.0 - std::ldexp(1.0, -fmt.significand_bits),
                    fmt.max_exponent());
}

double min_normal(const FloatFormatSpec& fmt) {
  return std::ldexp(1.0, fmt.min_exponent());
}

double min_positive(const FloatFormatSpec& fmt) {
  if (!fmt.supports_subnormals) return min_normal(fmt);
  return std::ldexp(1.0, fmt.min_exponent() - fmt.significand_bits);
}

double quantize(double x, const FloatFormatSpec& fmt) {
  if (std::isnan(x) && !fmt.reserves_inf_nan) {
    throw std::domain_error(fmt.name + " cannot encode NaN");
  }
  std::size_t nans = 0;
  return kernels::quantize_one(x, fmt.params(), nans);
}

void quantize(std::span<const double> in, std::span<double> out,
              const FloatFormatSpec& fmt) {
  if (in.size() != out.size()) {
    throw std::invalid_argument("quantize: size mismatch");
  }
  const std::size_t nans =
      kernels::active().quantize(in.data(), out.data(), in.size(), fmt.params());
  if (nans > 0 && !fmt.reserves_inf_nan) {
    throw std::domain_error(fmt.name + " cannot encode NaN");
  }
}

std::vector<double> quantized(std::span<const double> in,
                              const FloatFormatSpec& fmt) {
  std::vector<double> out(in.size());
  quantize(in, out, fmt);
  return out;
}

double ulp(double x, const FloatFormatSpec& fmt) {
  const double a = std::fabs(x);
  if (!std::isfinite(a)) return std::numeric_limits<double>::infinity();
  int e = a == 0.0 ? fmt.min_exponent() : std::ilogb(a);
  e = std::max(e, fmt.min_exponent());
  return std::ldexp(1.0, e - fmt.significand_bits);
}

double ulp_distance(double a, double b, const FloatFormatSpec& fmt) {
  if (a == b) return 0.0;
  if (!std::isfinite(a) || !std::isfinite(b)) {
    return std::numeric_limits<double>::infinity();
  }
  return std::fabs(a - b) / std::max(ulp(a, fmt), ulp(b, fmt));
}

std::uint32_t encode(double x, const FloatFormatSpec& fmt) {
  const int s_bits = fmt.significand_bits;
  const std::uint32_t top_code = (1u << fmt.exponent_bits) - 1u;
  std::uint32_t sign = 0;
  if (std::signbit(x) && !std::isnan(x)) {
    if (fmt.sign_bits == 0) {
      if (x != 0.0) throw std::invalid_argument("encode: negative value in unsigned format");
    } else {
      sign = 1u << (fmt.exponent_bits + s_bits);
    }
  }
  if (std::isnan(x)) {
    if (!fmt.reserves_inf_nan) throw std::domain_error("encode: NaN not encodable");
    return (top_code << s_bits) | (1u << (s_bits - 1));
  }
  const double a = std::fabs(x);
  if (std::isinf(a)) {
    if (!fmt.reserves_inf_nan) throw std::domain_error("encode: inf not encodable");
    return sign | (top_code << s_bits);
  }
  if (a == 0.0) return sign;
  if (quantize(a, fmt) != a) {
    throw std::invalid_argument("encode: value not representable");
  }
  if (a < min_normal(fmt)) {
    const double m = std::ldexp(a, -(fmt.min_exponent() - s_bits));
    return sign | static_cast<std::uint32_t>(m);
  }
  const int e = std::ilogb(a);
  const double frac = std::ldexp(a, -e) - 1.0;
  const auto m = static_cast<std::uint32_t>(std::ldexp(frac, s_bits));
  const auto field = static_cast<std::uint32_t>(e + fmt.bias);
  return sign | (field << s_bits) | m;
}

double decode(std::uint32_t bits, const FloatFormatSpec& fmt) {
  const int s_bits = fmt.significand_bits;
  const std::uint32_t top_code = (1u << fmt.exponent_bits) - 1u;
  const std::uint32_t m = bits & ((1u << s_bits) - 1u);
  const std::uint32_t field = (bits >> s_bits) & top_code;
  const bool negative =
      fmt.sign_bits == 1 && ((bits >> (s_bits + fmt.exponent_bits)) & 1u);
  double v;
  if (fmt.reserves_inf_nan && field == top_code) {
    v = m == 0 ? std::numeric_limits<double>::infinity()
               : std::numeric_limits<double>::quiet_NaN();
  } else if (field == 0) {
    v = fmt.supports_subnormals
            ? std::ldexp(static_cast<double>(m), fmt.min_exponent() - s_bits)
            : 0.0;
  } else {
    v = std::ldexp(1.0 + std::ldexp(static_cast<double>(m), -s_bits),
                   static_cast<int>(field) - fmt.bias);
  }
  return negative ? -v : v;
}

FormatCensus census(const FloatFormatSpec& fmt) {
  FormatCensus c;
  const std::uint32_t codes = 1u << fmt.total_bits();
  for (std::uint32_t b = 0; b < codes; ++b) {
    const double v = decode(b, fmt);
    if (std::isnan(v)) {
      ++c.nan_codes;
    } else if (std::isinf(v)) {
      ++c.infinite_codes;
    } else {
      ++c.finite_codes;
      if (v == 0.0) {
        ++c.zero_codes;
      } else if (std::fabs(v) < min_normal(fmt)) {
        ++c.subnormal_codes;
      }
    }
  }
  c.distinct_finite_values = c.finite_codes - (c.zero_codes > 0 ? c.zero_codes - 1 : 0);
  return c;
}

std::size_t ExponentHistogram::nonzero_count() const {
  std::size_t n = 0;
  for (const auto& [e, count] : bins) n += count;
  return n;
}

void ExponentHistogram::merge(const ExponentHistogram& other) {
  for (const auto& [e, count] : other.bins) bins[e] += count;
  zeros += other.zeros;
  nonfinite += other.nonfinite;
}

std::optional<int> ExponentHistogram::median_exponent() const {
  const std::size_t n = nonzero_count();
  if (n == 0) return std::nullopt;
  const std::size_t target = (n - 1) / 2;
  std::size_t seen = 0;
  for (const auto& [e, count] : bins) {
    seen += count;
    if (seen > target) return e;
  }
  return bins.rbegin()->first;
}

std::optional<int> ExponentHistogram::mode_exponent() const {
  std::optional<int> best;
  std::size_t best_count = 0;
  for (const auto& [e, count] : bins) {
    if (count > best_count) {
      best = e;
      best_count = count;
    }
  }
  return best;
}

ExponentHistogram exponent_histogram(std::span<const double> values) {
  ExponentHistogram h;
  for (double v : values) {
    if (!std::isfinite(v)) {
      ++h.nonfinite;
    } else if (v == 0.0) {
      ++h.zeros;
    } else {
      ++h.bins[std::ilogb(v)];
    }
  }
  return h;
}

}  // namespace shardsim::lowp
