// Copyright 2026 The shardsim Authors
// SPDX-License-Identifier: Apache-2.0

#include "shardsim/optim.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <stdexcept>

namespace shardsim::optim {

HyperParams HyperParams::transformer() { return HyperParams{}; }

HyperParams HyperParams::dvae() {
  HyperParams hp;
  hp.beta2 = 0.999;
  hp.weight_decay = 1e-4;
  hp.ewia_decay = 0.999;
  hp.variance_clamp = std::numeric_limits<double>::infinity();
  return hp;
}

void HyperParams::validate() const {
  if (!(beta1 > 0 && beta1 < 1) || !(beta2 > 0 && beta2 < 1)) {
    throw std::invalid_argument("optimizer betas must lie in (0, 1)");
  }
  if (!(eps > 0) || !(clip_threshold > 0) || !(variance_clamp > 0) ||
      !(ewia_decay > 0 && ewia_decay < 1) || ewia_interval < 1 || weight_decay < 0) {
    throw std::invalid_argument("invalid optimizer hyperparameters");
  }
}

AdamWState make_adamw_state(std::size_t rows, std::size_t cols,
                            MomentPrecision precision) {
  AdamWState s;
  s.precision = precision;
  s.mean = Tensor(rows, cols);
  s.variance = Tensor(rows, cols);
  if (precision == MomentPrecision::kLow) {
    s.mean = s.mean.with_format(lowp::m169());
    s.variance = s.variance.with_format(lowp::u0610());
  }
  return s;
}

AdamWState make_adamw_state_like(const Tensor& param, MomentPrecision precision) {
  AdamWState s = make_adamw_state(param.rows(), param.cols(), precision);
  if (param.rank() == 1) {
    s.mean = Tensor::vector(param.size());
    s.variance = Tensor::vector(param.size());
    if (precision == MomentPrecision::kLow) {
      s.mean = s.mean.with_format(lowp::m169());
      s.variance = s.variance.with_format(lowp::u0610());
    }
  }
  return s;
}

void adamw_step(Tensor& params, const Tensor& grads, AdamWState& state,
                const HyperParams& hp, double lr, bool apply_weight_decay) {
  if (!params.same_shape(grads) || !params.same_shape(state.mean) ||
      !params.same_shape(state.variance)) {
    throw std::invalid_argument("adamw_step: shape mismatch");
  }
  const std::size_t n = params.size();
  state.step += 1;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(hp.beta1, t);
  const double bc2 = 1.0 - std::pow(hp.beta2, t);
  const double clamp = hp.variance_clamp;
  const double decay = apply_weight_decay ? 1.0 - lr * hp.weight_decay : 1.0;

  std::vector<double> m(n), v(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double g = grads[i];
    m[i] = hp.beta1 * state.mean[i] + (1.0 - hp.beta1) * g;
    const double v_read = std::min(state.variance[i], clamp);
    v[i] = std::min(hp.beta2 * v_read + (1.0 - hp.beta2) * g * g, clamp);
  }
  state.mean.assign(m);
  state.variance.assign(v);

  std::span<double> p = params.mutable_values();
  for (std::size_t i = 0; i < n; ++i) {
    const double m_hat = state.mean[i] / bc1;
    const double v_hat = std::min(state.variance[i], clamp) / bc2;
    p[i] = p[i] * decay - lr * m_hat / (std::sqrt(v_hat) + hp.eps);
  }
}

double global_norm(std::span<const double> q_norms_sq,
                   std::span<const double> uncompressed_norms_sq,
                   bool any_nonfinite) {
  if (any_nonfinite) return std::numeric_limits<double>::infinity();
  double s = 0.0;
  for (double v : q_norms_sq) s += v;
  for (double v : uncompressed_norms_sq) s += v;
  return std::sqrt(s);
}

double clip_coefficient(double norm, double threshold) {
  if (std::isfinite(norm) && norm > threshold) return threshold / norm;
  return 1.0;
}

void clip_by_global_norm(std::span<Tensor*> grads, double norm, double threshold) {
  const double c = clip_coefficient(norm, threshold);
  if (c == 1.0) return;
  for (Tensor* g : grads) *g = scaled(*g, c);
}

void ewia_update(Tensor& avg, const Tensor& params, double decay,
                 std::int64_t step, std::int64_t interval) {
  if (interval < 1) throw std::invalid_argument("ewia_update: interval must be >= 1");
  if (step % interval != 0) return;
  if (!avg.same_shape(params)) throw std::invalid_argument("ewia_update: shape mismatch");
  std::span<double> a = avg.mutable_values();
  for (std::size_t i = 0; i < a.size(); ++i) {
    a[i] = decay * a[i] + (1.0 - decay) * params[i];
  }
}

void Schedule::validate() const {
  if (duration < 1) throw std::invalid_argument("schedule duration must be >= 1");
}

double cosine_value(const Schedule& sched, std::int64_t t) {
  sched.validate();
  if (t < 0) throw std::invalid_argument("cosine_value: t must be >= 0");
  const double T = static_cast<double>(sched.duration);
  const double x = static_cast<double>(std::min(t, sched.duration));
  return sched.end_value +
         (sched.start_value - sched.end_value) * (1.0 + std::cos(std::numbers::pi * x / T)) / 2.0;
}

double linear_warmup_value(const Schedule& sched, std::int64_t t) {
  sched.validate();
  if (t < 0) throw std::invalid_argument("linear_warmup_value: t must be >= 0");
  const double frac = static_cast<double>(std::min(t, sched.duration)) /
                      static_cast<double>(sched.duration);
  return sched.start_value + (sched.end_value - sched.start_value) * frac;
}

double Schedule::value(std::int64_t t) const {
  switch (kind) {
    case ScheduleKind::kCosine:
      return cosine_value(*this, t);
    case ScheduleKind::kLinearWarmup:
      return linear_warmup_value(*this, t);
    case ScheduleKind::kConstant:
      return start_value;
  }
  return start_value;
}

PlateauHalving::PlateauHalving(double initial, std::size_t window,
                               double min_relative_improvement, int max_halvings)
    : initial_(initial),
      value_(initial),
      window_(window),
      min_improvement_(min_relative_improvement),
      max_halvings_(max_halvings) {
  if (!(initial > 0) || window < 1 || max_halvings < 0) {
    throw std::invalid_argument("PlateauHalving: invalid parameters");
  }
}

bool PlateauHalving::halve() {
  if (halvings_ >= max_halvings_) return false;
  value_ /= 2.0;
  ++halvings_;
  history_.clear();
  return true;
}

bool PlateauHalving::observe(double loss) {
  history_.push_back(loss);
  if (history_.size() > 2 * window_) history_.pop_front();
  if (history_.size() < 2 * window_) return false;
  const double older = std::accumulate(history_.begin(), history_.begin() + window_, 0.0) /
                       static_cast<double>(window_);
  const double recent = std::accumulate(history_.begin() + window_, history_.end(), 0.0) /
                        static_cast<double>(window_);
  const double improvement = (older - recent) / std::max(std::fabs(older), 1e-300);
  if (improvement < min_improvement_) return halve();
  return false;
}

}  // namespace shardsim::optim
