// Copyright 2026 The shardsim Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <limits>
#include <optional>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "support/scaler_model.hpp"
#include "shardsim/gradscale.hpp"
#include "shardsim/lowp.hpp"
#include "shardsim/rng.hpp"

using namespace shardsim;
using gradscale::ResblockScaler;

using shardsim::oracle::ModelScaler;

TEST_CASE("initial scale is M * 2^13") {
  CHECK(ResblockScaler(1).scale() == 8192.0);
  CHECK(ResblockScaler(128).scale() == 1048576.0);
  CHECK(ResblockScaler(8).scale() == 65536.0);
  CHECK_FALSE(ResblockScaler(1).last_backoff_step().has_value());
  CHECK_THROWS_AS(ResblockScaler(0), std::invalid_argument);
}

TEST_CASE("growth over 1000 finite steps doubles the scale") {
  ResblockScaler s(4);
  const double start = s.scale();
  for (int t = 1; t <= 1000; ++t) CHECK(s.on_step(true, t).apply_update);
  CHECK(std::fabs(s.scale() / (2 * start) - 1.0) <= 1e-9);
}

TEST_CASE("backoff window") {
  ResblockScaler s(1);
  const double start = s.scale();
  auto first = s.on_step(false, 100);
  CHECK_FALSE(first.apply_update);
  CHECK(first.backed_off);
  CHECK(s.scale() == doctest::Approx(start / std::sqrt(2.0)).epsilon(1e-15));
  const double after = s.scale();
  auto second = s.on_step(false, 150);
  CHECK_FALSE(second.apply_update);
  CHECK_FALSE(second.backed_off);
  CHECK(s.scale() == after);
  CHECK(s.on_step(false, 225).backed_off);
  CHECK_THROWS_AS(s.on_step(true, 225), std::invalid_argument);
}

TEST_CASE("clamp bounds") {
  ResblockScaler hi = ResblockScaler::restore(2, 2 * 16777216.0, std::nullopt, std::nullopt);
  hi.on_step(true, 1);
  CHECK(hi.scale() == hi.clamp_hi());
  CHECK(hi.clamp_hi() == 2 * std::ldexp(1.0, 24));
  ResblockScaler lo = ResblockScaler::restore(2, 2 * 128.0, std::nullopt, std::nullopt);
  lo.on_step(false, 1);
  CHECK(lo.scale() == lo.clamp_lo());
  CHECK(lo.clamp_lo() == 256.0);
}

TEST_CASE("randomized event sequences follow the rule model") {
  Rng rng(17);
  for (int trial = 0; trial < 200; ++trial) {
    const std::uint64_t m = 1 + rng.below(64);
    const double p_bad = 0.001 + 0.3 * rng.uniform();
    ResblockScaler s(m);
    ModelScaler model(static_cast<double>(m));
    std::vector<std::int64_t> backoffs;
    std::int64_t t = 0;
    for (int i = 0; i < 3000; ++i) {
      t += 1 + static_cast<std::int64_t>(rng.below(3));
      const bool finite = rng.uniform() >= p_bad;
      const auto out = s.on_step(finite, t);
      const bool want = model.step(finite, t);
      REQUIRE(out.apply_update == want);
      REQUIRE(out.apply_update == finite);
      REQUIRE(std::fabs(s.scale() - model.scale) <= 1e-9 * model.scale);
      REQUIRE(s.scale() >= s.clamp_lo());
      REQUIRE(s.scale() <= s.clamp_hi());
      if (out.backed_off) backoffs.push_back(t);
    }
    for (std::size_t k = 1; k < backoffs.size(); ++k) {
      CHECK(backoffs[k] - backoffs[k - 1] >= ResblockScaler::kWindow);
    }
  }
}

TEST_CASE("closed-form trajectory for all-finite runs") {
  ResblockScaler s(3);
  for (int t = 1; t <= 5000; ++t) {
    s.on_step(true, t);
    const double want = std::min(3 * 8192.0 * std::exp2(t / 1000.0), 3 * 16777216.0);
    REQUIRE(std::fabs(s.scale() - want) <= 1e-9 * want);
  }
}

TEST_CASE("filter_nonfinite") {
  const double inf = std::numeric_limits<double>::infinity();
  CHECK(gradscale::filter_nonfinite(Tensor::vector({1, inf, std::nan(""), -2})) ==
        Tensor::vector({1, 0, 0, -2}));
  const Tensor ok = Tensor::vector({0.5, -3});
  CHECK(gradscale::filter_nonfinite(ok) == ok);
  const Tensor nans = Tensor::vector({std::nan(""), std::nan("")});
  CHECK(gradscale::filter_nonfinite(nans) == Tensor::vector({0, 0}));
}

TEST_CASE("scale_incoming and unscale_outgoing") {
  Rng rng(6);
  const Tensor g = Tensor::gaussian(5, 5, rng, 1e-3);
  const double s = 1024.0;
  const Tensor round_trip = gradscale::unscale_outgoing(gradscale::scale_incoming(g, s), s);
  for (std::size_t i = 0; i < g.size(); ++i) {
    CHECK(round_trip[i] == lowp::quantize(g[i] * s, lowp::fp16()) / s);
  }
  const double min_sub = lowp::min_positive(lowp::fp16());
  CHECK(min_sub == std::ldexp(1.0, -24));
  const Tensor tiny = Tensor::full(3, 1, std::ldexp(1.0, -20));
  const Tensor scaled_tiny = gradscale::scale_incoming(tiny, 8192.0);
  for (double v : scaled_tiny.values()) CHECK(v == std::ldexp(1.0, -7));
  const Tensor big = Tensor::full(1, 1, 8.0);
  CHECK(std::isinf(gradscale::scale_incoming(big, 16384.0)[0]));
  CHECK_THROWS_AS(gradscale::scale_incoming(g, 0.0), std::invalid_argument);
}

TEST_CASE("divisor calibration recenters the median exponent") {
  const int mid = gradscale::exponent_midpoint(lowp::fp16());
  CHECK(mid == -5);
  lowp::ExponentHistogram h;
  h.bins[20] = 10;
  auto cal = gradscale::calibrate_divisor(std::vector<lowp::ExponentHistogram>{h}, lowp::fp16());
  CHECK(cal.pre_allreduce_divisor == std::ldexp(1.0, 25));
  CHECK(cal.divisor_log2 == 25);
  lowp::ExponentHistogram at;
  at.bins[mid] = 4;
  cal = gradscale::calibrate_divisor(std::vector<lowp::ExponentHistogram>{at}, lowp::fp16());
  CHECK(cal.pre_allreduce_divisor == 1.0);
  CHECK_THROWS_AS(gradscale::calibrate_divisor(std::vector<lowp::ExponentHistogram>{},
                                               lowp::fp16()),
                  std::invalid_argument);
  CHECK_THROWS_AS(gradscale::calibrate_divisor(
                      std::vector<lowp::ExponentHistogram>{lowp::ExponentHistogram{}},
                      lowp::fp16()),
                  std::invalid_argument);

  Rng rng(12);
  std::vector<double> values(2000);
  for (double& v : values) v = (rng.uniform() < 0.5 ? -1 : 1) * std::exp2(10.0 + 5.0 * rng.uniform());
  const auto hist = lowp::exponent_histogram(values);
  cal = gradscale::calibrate_divisor(std::vector<lowp::ExponentHistogram>{hist}, lowp::fp16());
  std::size_t underflow = 0;
  std::size_t overflow = 0;
  for (double v : values) {
    const double q = lowp::quantize(v / cal.pre_allreduce_divisor, lowp::fp16());
    if (q == 0.0) ++underflow;
    if (std::isinf(q)) ++overflow;
  }
  CHECK(underflow == 0);
  CHECK(overflow == 0);
}
