// Copyright 2026 The shardsim Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "shardsim/lowp.hpp"
#include "shardsim/optim.hpp"
#include "shardsim/rng.hpp"
#include "shardsim/tensor.hpp"

using namespace shardsim;
using namespace shardsim::optim;

namespace {

struct ScalarAdam {
  double m = 0, v = 0;
  long t = 0;
  bool rounded = false;
  double step(double p, double g, const HyperParams& hp, double lr, bool wd) {
    ++t;
    m = hp.beta1 * m + (1 - hp.beta1) * g;
    v = std::min(hp.beta2 * std::min(v, hp.variance_clamp) + (1 - hp.beta2) * g * g,
                 hp.variance_clamp);
    if (rounded) {
      m = lowp::quantize(m, lowp::m169());
      v = lowp::quantize(v, lowp::u0610());
    }
    const double mhat = m / (1 - std::pow(hp.beta1, static_cast<double>(t)));
    const double vhat = v / (1 - std::pow(hp.beta2, static_cast<double>(t)));
    const double decayed = wd ? p * (1 - lr * hp.weight_decay) : p;
    return decayed - lr * mhat / (std::sqrt(vhat) + hp.eps);
  }
};

}  // namespace

TEST_CASE("hyperparameter presets") {
  const auto t = HyperParams::transformer();
  CHECK(t.beta2 == 0.96);
  CHECK(t.weight_decay == 4.5e-2);
  CHECK(t.ewia_decay == 0.99);
  const auto d = HyperParams::dvae();
  CHECK(d.beta2 == 0.999);
  CHECK(d.weight_decay == 1e-4);
  CHECK(d.ewia_decay == 0.999);
  HyperParams bad;
  bad.beta1 = 1.0;
  CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("adamw matches a scalar oracle in full precision") {
  Rng rng(1);
  HyperParams hp;
  hp.variance_clamp = 0.5;
  for (bool wd : {true, false}) {
    Tensor p = Tensor::gaussian(3, 4, rng);
    auto st = make_adamw_state_like(p, MomentPrecision::kFull);
    std::vector<ScalarAdam> oracle(p.size());
    std::vector<double> want(p.values().begin(), p.values().end());
    for (int step = 0; step < 40; ++step) {
      const Tensor g = Tensor::gaussian(3, 4, rng, 1.0);
      adamw_step(p, g, st, hp, 0.01, wd);
      for (std::size_t i = 0; i < p.size(); ++i) want[i] = oracle[i].step(want[i], g[i], hp, 0.01, wd);
    }
    CHECK(st.step == 40);
    for (std::size_t i = 0; i < p.size(); ++i) {
      CHECK(p[i] == doctest::Approx(want[i]).epsilon(1e-13));
      CHECK(st.variance[i] <= hp.variance_clamp);
    }
  }
  Tensor p(2, 2);
  auto st = make_adamw_state_like(p, MomentPrecision::kFull);
  CHECK_THROWS_AS(adamw_step(p, Tensor(2, 3), st, hp, 0.1), std::invalid_argument);
}

TEST_CASE("adamw basic behaviour") {
  HyperParams hp;
  hp.weight_decay = 0.0;
  Tensor p = Tensor::full(2, 2, 1.5);
  auto st = make_adamw_state_like(p, MomentPrecision::kLow);
  adamw_step(p, Tensor(2, 2), st, hp, 0.1);
  CHECK(p == Tensor::full(2, 2, 1.5));

  Tensor x(1, 1);
  auto s = make_adamw_state(1, 1, MomentPrecision::kFull);
  double last_step = 0;
  for (int t = 0; t < 300; ++t) {
    const double before = x[0];
    adamw_step(x, Tensor::full(1, 1, 0.3), s, hp, 0.01);
    last_step = before - x[0];
  }
  CHECK(std::fabs(last_step - 0.01) < 1e-3 * 0.01);

  Rng rng(3);
  Tensor y = Tensor::gaussian(1, 8, rng);
  auto low = make_adamw_state_like(y, MomentPrecision::kLow);
  std::vector<ScalarAdam> oracle(8);
  std::vector<double> want(y.values().begin(), y.values().end());
  for (auto& o : oracle) o.rounded = true;
  for (int t = 0; t < 100; ++t) {
    const Tensor g = Tensor::gaussian(1, 8, rng, 0.5);
    adamw_step(y, g, low, hp, 0.01);
    for (std::size_t i = 0; i < 8; ++i) want[i] = oracle[i].step(want[i], g[i], hp, 0.01, true);
  }
  for (std::size_t i = 0; i < 8; ++i) {
    CHECK(y[i] == doctest::Approx(want[i]).epsilon(1e-12));
    CHECK(low.mean[i] == oracle[i].m);
    CHECK(low.variance[i] == oracle[i].v);
  }
  CHECK(low.mean.format()->name == lowp::m169().name);
  CHECK(low.variance.format()->name == lowp::u0610().name);
}

TEST_CASE("quadratic bowl with low-precision moments") {
  HyperParams hp;
  hp.weight_decay = 0.0;
  double final_loss[2];
  int k = 0;
  for (auto prec : {MomentPrecision::kFull, MomentPrecision::kLow}) {
    Tensor x = Tensor::full(1, 4, 2.0);
    x.set(0, 1, -1.0);
    x.set(0, 2, 0.5);
    auto s = make_adamw_state_like(x, prec);
    for (int t = 0; t < 500; ++t) {
      const double lr = 0.05 * (1 + std::cos(std::numbers::pi * t / 500.0)) / 2;
      adamw_step(x, x, s, hp, lr);
    }
    final_loss[k++] = 0.5 * squared_norm(x);
  }
  CHECK(final_loss[0] < 1e-2);
  CHECK(std::fabs(final_loss[0] - final_loss[1]) < 1e-3);
}

TEST_CASE("global norm and clipping") {
  const std::vector<double> q = {9, 16};
  CHECK(global_norm(q, {}, false) == 5.0);
  CHECK(std::isinf(global_norm(q, {}, true)));
  CHECK(global_norm(std::vector<double>{9}, std::vector<double>{16}, false) == 5.0);
  CHECK(clip_coefficient(8, 4) == 0.5);
  CHECK(clip_coefficient(2, 4) == 1.0);
  CHECK(clip_coefficient(std::numeric_limits<double>::infinity(), 4) == 1.0);

  Rng rng(2);
  for (double scale : {0.1, 1.0, 10.0}) {
    Tensor a = Tensor::gaussian(3, 3, rng, scale), b = Tensor::gaussian(2, 5, rng, scale);
    const double norm = std::sqrt(squared_norm(a) + squared_norm(b));
    std::vector<Tensor*> gs = {&a, &b};
    clip_by_global_norm(gs, norm, 4.0);
    const double after = std::sqrt(squared_norm(a) + squared_norm(b));
    CHECK(std::fabs(after - std::min(norm, 4.0)) <= 1e-9);
  }
  Tensor h = Tensor::full(1, 2, 3.0);
  std::vector<Tensor*> one = {&h};
  clip_by_global_norm(one, 8.0, 4.0);
  CHECK(h == Tensor::full(1, 2, 1.5));
}

TEST_CASE("iterate averaging") {
  Tensor avg(1, 1);
  const Tensor ones = Tensor::full(1, 1, 1.0);
  ewia_update(avg, ones, 0.99, 25);
  CHECK(avg[0] == doctest::Approx(0.01).epsilon(1e-15));
  ewia_update(avg, ones, 0.99, 26);
  CHECK(avg[0] == doctest::Approx(0.01).epsilon(1e-15));
  double gap = 1 - avg[0];
  for (int copy = 2; copy <= 10; ++copy) {
    ewia_update(avg, ones, 0.99, 25 * copy);
    const double next = 1 - avg[0];
    CHECK(next / gap == doctest::Approx(0.99).epsilon(1e-12));
    gap = next;
  }
}

TEST_CASE("schedules") {
  const Schedule kl{ScheduleKind::kCosine, 0.0, 6.6, 5000};
  CHECK(kl.value(0) == 0.0);
  CHECK(std::fabs(kl.value(5000) - 6.6) <= 1e-12);
  CHECK(std::fabs(kl.value(9000) - 6.6) <= 1e-12);
  CHECK(std::fabs(kl.value(2500) - 3.3) <= 1e-12);
  const Schedule tau{ScheduleKind::kCosine, 1.0, 1.0 / 16, 150000};
  CHECK(std::fabs(tau.value(150000) - 1.0 / 16) <= 1e-12);
  CHECK(std::fabs(tau.value(75000) - (1.0 + 1.0 / 16) / 2) <= 1e-12);
  for (std::int64_t t : {0, 17, 300, 1000}) {
    const double want = 0.5 + (2.0 - 0.5) * (1 + std::cos(std::numbers::pi * std::min<std::int64_t>(t, 1000) / 1000.0)) / 2;
    CHECK(std::fabs(cosine_value(Schedule{ScheduleKind::kCosine, 2.0, 0.5, 1000}, t) - want) <= 1e-12);
  }
  const Schedule warm{ScheduleKind::kLinearWarmup, 0.0, 1e-3, 100};
  CHECK(warm.value(0) == 0.0);
  CHECK(std::fabs(warm.value(50) - 5e-4) <= 1e-12);
  CHECK(warm.value(100) == 1e-3);
  CHECK(warm.value(1000) == 1e-3);
  CHECK(Schedule{ScheduleKind::kConstant, 0.3, 0.0, 1}.value(42) == 0.3);
  CHECK_THROWS_AS((Schedule{ScheduleKind::kCosine, 1, 0, 0}.validate()), std::invalid_argument);
}

TEST_CASE("plateau halving") {
  PlateauHalving lr(1e-3, 10, 0.01, 5);
  for (int i = 0; i < 5; ++i) CHECK(lr.halve());
  CHECK(lr.value() * 32 == lr.initial());
  CHECK_FALSE(lr.halve());
  CHECK(lr.halvings() == 5);

  PlateauHalving flat(1.0, 5, 0.01, 5);
  int triggered = 0;
  for (int i = 0; i < 200; ++i) triggered += flat.observe(2.0);
  CHECK(triggered == 5);
  CHECK(flat.value() == 1.0 / 32);

  PlateauHalving falling(1.0, 5, 0.01, 5);
  bool any = false;
  for (int i = 0; i < 200; ++i) any |= falling.observe(std::exp(-0.05 * i));
  CHECK_FALSE(any);
  CHECK(falling.value() == 1.0);
}
