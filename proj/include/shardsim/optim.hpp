// Copyright 2026 The shardsim Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <limits>
#include <span>
#include <string_view>
#include <vector>

#include "shardsim/tensor.hpp"

namespace shardsim::optim {

struct HyperParams {
  double beta1 = 0.9;
  double beta2 = 0.96;
  double eps = 1e-8;
  double weight_decay = 4.5e-2;
  double clip_threshold = 4.0;
  // Upper bound on the running variance; +inf disables the clamp.
  double variance_clamp = 5.0;
  double ewia_decay = 0.99;
  std::int64_t ewia_interval = 25;

  static HyperParams transformer();
  static HyperParams dvae();
  void validate() const;
};

enum class MomentPrecision { kFull, kLow };

// Moments for one parameter tensor. In low precision the mean is stored in
// 1-6-9 and the variance in 0-6-10.
struct AdamWState {
  Tensor mean;
  Tensor variance;
  std::int64_t step = 0;
  MomentPrecision precision = MomentPrecision::kFull;
};

AdamWState make_adamw_state(std::size_t rows, std::size_t cols,
                            MomentPrecision precision);
AdamWState make_adamw_state_like(const Tensor& param, MomentPrecision precision);

// One decoupled-weight-decay Adam step with bias correction:
//   m = b1 m + (1 - b1) g
//   v = min(b2 min(v, c) + (1 - b2) g^2, c)
//   p = p (1 - lr wd) - lr (m / (1 - b1^t)) / (sqrt(v / (1 - b2^t)) + eps)
// where c is the variance clamp. `apply_weight_decay` is false for gains
// and biases.
void adamw_step(Tensor& params, const Tensor& grads, AdamWState& state,
                const HyperParams& hp, double lr, bool apply_weight_decay = true);

// sqrt(sum of squared norms), or +inf when any_nonfinite.
double global_norm(std::span<const double> q_norms_sq,
                   std::span<const double> uncompressed_norms_sq,
                   bool any_nonfinite);

// threshold / norm when norm is finite and exceeds the threshold, else 1.
double clip_coefficient(double norm, double threshold);
void clip_by_global_norm(std::span<Tensor*> grads, double norm, double threshold);

// On steps that are multiples of `interval`: avg = decay avg + (1 - decay) p.
void ewia_update(Tensor& avg, const Tensor& params, double decay,
                 std::int64_t step, std::int64_t interval = 25);

enum class ScheduleKind { kCosine, kLinearWarmup, kConstant };

struct Schedule {
  ScheduleKind kind = ScheduleKind::kConstant;
  double start_value = 0.0;
  double end_value = 0.0;
  std::int64_t duration = 1;

  void validate() const;
  double value(std::int64_t t) const;
};

double cosine_value(const Schedule& sched, std::int64_t t);
double linear_warmup_value(const Schedule& sched, std::int64_t t);

// Step size that halves whenever the training loss stops improving.
// After each observed loss the moving average over `window` updates is
// compared with the average one window earlier; if it improved by less
// than `min_relative_improvement` the value halves, up to `max_halvings`
// times. Each halving restarts the comparison.
class PlateauHalving {
 public:
  PlateauHalving(double initial, std::size_t window,
                 double min_relative_improvement, int max_halvings);

  double value() const { return value_; }
  double initial() const { return initial_; }
  int halvings() const { return halvings_; }
  // Returns true when this observation triggered a halving.
  bool observe(double loss);
  // Halves immediately (subject to max_halvings).
  bool halve();

 private:
  double initial_;
  double value_;
  std::size_t window_;
  double min_improvement_;
  int max_halvings_;
  int halvings_ = 0;
  std::deque<double> history_;
};

}  // namespace shardsim::optim
