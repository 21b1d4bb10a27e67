// Copyright 2026 The shardsim Authors
// SPDX-License-Identifier: Apache-2.0

// Software emulation of small floating-point storage formats.
//
// All arithmetic happens in double precision; values are rounded to a
// format when they are stored ("quantize on store"). Rounding is
// round-to-nearest-even, subnormals are supported, and overflow either
// produces infinity or saturates at the largest finite value.

#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "shardsim/kernels.hpp"

namespace shardsim::lowp {

enum class OverflowPolicy { kToInfinity, kClampToMax };

struct FloatFormatSpec {
  std::string name;
  int sign_bits = 1;
  int exponent_bits = 5;
  int significand_bits = 10;
  int bias = 15;
  bool reserves_inf_nan = true;
  bool supports_subnormals = true;
  OverflowPolicy overflow_policy = OverflowPolicy::kToInfinity;

  // Throws std::invalid_argument for unsupported parameter combinations.
  void validate() const;

  int total_bits() const { return sign_bits + exponent_bits + significand_bits; }
  // Unbiased exponent of the largest finite binade.
  int max_exponent() const;
  // Unbiased exponent of the smallest normal binade.
  int min_exponent() const { return 1 - bias; }

  kernels::QuantizeParams params() const;

  bool operator==(const FloatFormatSpec& other) const = default;
};

// IEEE binary16.
const FloatFormatSpec& fp16();
// Signed, 6 exponent bits, 9 significand bits. Bias 59 puts the largest
// finite value at (2 - 2^-9) * 2^3 = 15.984375.
const FloatFormatSpec& m169();
// Unsigned, 6 exponent bits, 10 significand bits. Bias 60 gives a largest
// finite value of (2 - 2^-10) * 2^2 = 7.99609375.
const FloatFormatSpec& u0610();

// Looks up "fp16", "1-5-10", "m169", "1-6-9", "u0610", "0-6-10".
std::optional<FloatFormatSpec> format_by_name(std::string_view name);

// Throws std::domain_error for NaN input when the format cannot encode NaN.
double quantize(double x, const FloatFormatSpec& fmt);
void quantize(std::span<const double> in, std::span<double> out,
              const FloatFormatSpec& fmt);
std::vector<double> quantized(std::span<const double> in,
                              const FloatFormatSpec& fmt);

double max_finite(const FloatFormatSpec& fmt);
double min_positive(const FloatFormatSpec& fmt);
double min_normal(const FloatFormatSpec& fmt);

// Gap between |x| and the next larger representable magnitude, for x already
// representable. For zero this is min_positive.
double ulp(double x, const FloatFormatSpec& fmt);
// Distance |a - b| measured in units of the larger of the two local ulps.
double ulp_distance(double a, double b, const FloatFormatSpec& fmt);

// Bit-level encoding. `x` must be representable (quantize first).
std::uint32_t encode(double x, const FloatFormatSpec& fmt);
double decode(std::uint32_t bits, const FloatFormatSpec& fmt);

struct FormatCensus {
  std::size_t finite_codes = 0;
  std::size_t subnormal_codes = 0;
  std::size_t zero_codes = 0;
  std::size_t infinite_codes = 0;
  std::size_t nan_codes = 0;
  std::size_t distinct_finite_values = 0;
};
// Classifies every bit pattern of the format.
FormatCensus census(const FloatFormatSpec& fmt);

struct ExponentHistogram {
  std::map<int, std::size_t> bins;  // keyed by floor(log2 |v|)
  std::size_t zeros = 0;
  std::size_t nonfinite = 0;

  std::size_t nonzero_count() const;
  void merge(const ExponentHistogram& other);
  // Lower median of the exponent distribution over nonzero finite values.
  std::optional<int> median_exponent() const;
  std::optional<int> mode_exponent() const;
};

ExponentHistogram exponent_histogram(std::span<const double> values);

}  // namespace shardsim::lowp
