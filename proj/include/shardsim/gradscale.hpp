// Copyright 2026 The shardsim Authors
// SPDX-License-Identifier: Apache-2.0

// Per-resblock gradient scaling.
//
// Each resblock owns a ResblockScaler. The scale grows by 2^(1/1000) on every
// update whose gradients are all finite. A nonfinite update is skipped and
// the scale is divided by sqrt(2), unless the previous division happened
// fewer than `window` updates earlier, in which case the scale is left
// alone. The scale always stays inside [M * 2^7, M * 2^24].

#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "shardsim/lowp.hpp"
#include "shardsim/tensor.hpp"

namespace shardsim::gradscale {

struct ScalerOutcome {
  bool apply_update = false;
  bool backed_off = false;
};

class ResblockScaler {
 public:
  static constexpr int kWindow = 125;

  // Throws std::invalid_argument when replica_count == 0.
  explicit ResblockScaler(std::uint64_t replica_count);

  // Reconstructs a scaler from saved state.
  static ResblockScaler restore(std::uint64_t replica_count, double scale,
                                std::optional<std::int64_t> last_backoff_step,
                                std::optional<std::int64_t> last_step);

  // `step` must be strictly increasing across calls.
  ScalerOutcome on_step(bool all_finite, std::int64_t step);

  double scale() const { return scale_; }
  std::uint64_t replica_count() const { return replica_count_; }
  double growth_factor() const { return growth_; }
  double backoff_factor() const { return backoff_; }
  double clamp_lo() const { return clamp_lo_; }
  double clamp_hi() const { return clamp_hi_; }
  std::optional<std::int64_t> last_backoff_step() const { return last_backoff_; }
  std::optional<std::int64_t> last_step() const { return last_step_; }

 private:
  std::uint64_t replica_count_;
  double scale_;
  double growth_;
  double backoff_;
  double clamp_lo_;
  double clamp_hi_;
  std::optional<std::int64_t> last_backoff_;
  std::optional<std::int64_t> last_step_;
};

// Replaces Inf and NaN elements with zero.
Tensor filter_nonfinite(const Tensor& g);

// Multiplies by `scale` and rounds through fp16 (branch path).
Tensor scale_incoming(const Tensor& g, double scale);
// Divides by `scale` in double precision (identity path).
Tensor unscale_outgoing(const Tensor& g, double scale);

struct DivisorCalibration {
  double pre_allreduce_divisor = 1.0;  // always a power of two
  int divisor_log2 = 0;
  int median_exponent = 0;
  int target_exponent = 0;
  lowp::ExponentHistogram source_histogram;
};

// Midpoint of a format's exponent range: floor((e_min_positive + e_max) / 2),
// with e_min_positive = floor(log2(min_positive)).
int exponent_midpoint(const lowp::FloatFormatSpec& fmt);

// Picks the power of two that moves the pooled median exponent to the
// midpoint of `fmt` (or to `target_exponent` when given). Throws
// std::invalid_argument when the histograms hold no nonzero finite values.
DivisorCalibration calibrate_divisor(
    std::span<const lowp::ExponentHistogram> histograms,
    const lowp::FloatFormatSpec& fmt,
    std::optional<int> target_exponent = std::nullopt);

}  // namespace shardsim::gradscale
