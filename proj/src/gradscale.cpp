// Copyright 2026 The shardsim Authors
// SPDX-License-Identifier: Apache-2.0

#include "shardsim/gradscale.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace shardsim::gradscale {

ResblockScaler::ResblockScaler(std::uint64_t replica_count)
    : replica_count_(replica_count) {
  if (replica_count == 0) {
    throw std::invalid_argument("ResblockScaler: replica count must be >= 1");
  }
  const double m = static_cast<double>(replica_count);
  scale_ = m * 0x1p13;
  growth_ = std::exp2(1.0 / 1000.0);
  backoff_ = 1.0 / std::sqrt(2.0);
  clamp_lo_ = m * 0x1p7;
  clamp_hi_ = m * 0x1p24;
}

ResblockScaler ResblockScaler::restore(std::uint64_t replica_count, double scale,
                                       std::optional<std::int64_t> last_backoff_step,
                                       std::optional<std::int64_t> last_step) {
  ResblockScaler s(replica_count);
  if (!(scale >= s.clamp_lo_ && scale <= s.clamp_hi_)) {
    throw std::invalid_argument("ResblockScaler::restore: scale outside clamp range");
  }
  s.scale_ = scale;
  s.last_backoff_ = last_backoff_step;
  s.last_step_ = last_step;
  return s;
}

ScalerOutcome ResblockScaler::on_step(bool all_finite, std::int64_t step) {
  if (last_step_ && step <= *last_step_) {
    throw std::invalid_argument("ResblockScaler::on_step: step must increase");
  }
  last_step_ = step;
  ScalerOutcome out;
  if (all_finite) {
    scale_ = std::min(scale_ * growth_, clamp_hi_);
    out.apply_update = true;
    return out;
  }
  const bool in_window = last_backoff_ && step - *last_backoff_ < kWindow;
  if (!in_window) {
    scale_ = std::max(scale_ * backoff_, clamp_lo_);
    last_backoff_ = step;
    out.backed_off = true;
  }
  return out;
}

Tensor filter_nonfinite(const Tensor& g) {
  Tensor out = g.untagged();
  for (double& v : out.mutable_values()) {
    if (!std::isfinite(v)) v = 0.0;
  }
  return out;
}

Tensor scale_incoming(const Tensor& g, double scale) {
  if (!(scale > 0.0)) throw std::invalid_argument("scale_incoming: scale must be > 0");
  Tensor s = scaled(g, scale);
  lowp::quantize(s.values(), s.mutable_values(), lowp::fp16());
  return s;
}

Tensor unscale_outgoing(const Tensor& g, double scale) {
  if (!(scale > 0.0)) throw std::invalid_argument("unscale_outgoing: scale must be > 0");
  return divided(g, scale);
}

int exponent_midpoint(const lowp::FloatFormatSpec& fmt) {
  const int lo = std::ilogb(lowp::min_positive(fmt));
  const int hi = fmt.max_exponent();
  const int sum = lo + hi;
  return sum >= 0 ? sum / 2 : -((-sum + 1) / 2);
}

DivisorCalibration calibrate_divisor(
    std::span<const lowp::ExponentHistogram> histograms,
    const lowp::FloatFormatSpec& fmt, std::optional<int> target_exponent) {
  DivisorCalibration cal;
  for (const auto& h : histograms) cal.source_histogram.merge(h);
  const auto median = cal.source_histogram.median_exponent();
  if (!median) {
    throw std::invalid_argument("calibrate_divisor: no nonzero finite values");
  }
  cal.median_exponent = *median;
  cal.target_exponent = target_exponent.value_or(exponent_midpoint(fmt));
  cal.divisor_log2 = cal.median_exponent - cal.target_exponent;
  cal.pre_allreduce_divisor = std::ldexp(1.0, cal.divisor_log2);
  return cal;
}

}  // namespace shardsim::gradscale
