// Copyright 2026 The shardsim Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "shardsim/lowp.hpp"
#include "shardsim/powersgd.hpp"
#include "shardsim/rng.hpp"
#include "shardsim/tensor.hpp"

using namespace shardsim;
using powersgd::CompressionConfig;
using powersgd::LowRankState;
using powersgd::QPolicy;

namespace {

double gram_error(const Tensor& p) {
  const Tensor g = matmul(p, p, true, false);
  return max_abs_diff(g, Tensor::identity(p.cols()));
}

CompressionConfig wide(std::size_t rank, QPolicy policy = QPolicy::kFixed, std::uint64_t seed = 1) {
  CompressionConfig c;
  c.rank = rank;
  c.q_policy = policy;
  c.q_seed = seed;
  c.low_precision = false;
  return c;
}

Tensor outer(const Tensor& u, const Tensor& v) {
  return matmul(u, v, false, true);
}

// Residual of projecting the columns of b onto span(q) (q orthonormal).
double projection_residual(const Tensor& q, const Tensor& b) {
  const Tensor proj = matmul(q, matmul(q, b, true, false));
  return max_abs_diff(proj, b);
}

}  // namespace

TEST_CASE("orientation") {
  CHECK(powersgd::orient(4096, 128));
  CHECK_FALSE(powersgd::orient(128, 4096));
  CHECK_FALSE(powersgd::orient(64, 64));
  LowRankState s(40, 8, wide(2));
  CHECK(s.transposed());
  CHECK(s.m() == 8);
  CHECK(s.n() == 40);
  CHECK(s.error_buffer_original().rows() == 40);
}

TEST_CASE("config validation") {
  CompressionConfig c = wide(2);
  c.p_scale = 3.0;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  CHECK_THROWS_AS(LowRankState(4, 8, wide(5)), std::invalid_argument);
  CHECK(powersgd::parse_q_policy("warm_start") == QPolicy::kWarmStart);
  CHECK_THROWS_AS(powersgd::parse_q_policy("sometimes"), std::invalid_argument);
}

TEST_CASE("error accumulation") {
  Rng rng(1);
  CompressionConfig c;
  c.rank = 1;
  const Tensor g = Tensor::gaussian(6, 10, rng);
  LowRankState s(6, 10, c);
  s.accumulate_error(g, 4.0, true);
  for (std::size_t i = 0; i < g.size(); ++i) {
    CHECK(s.error_buffer()[i] == lowp::quantize(g[i] / 4.0, lowp::m169()));
  }
  const Tensor before = s.error_buffer();
  s.accumulate_error(scaled(g, 100.0), 1.0, false);
  CHECK(s.error_buffer() == before);

  LowRankState halves(6, 10, c);
  halves.accumulate_error(scaled(g, 0.5), 1.0, true);
  halves.accumulate_error(scaled(g, 0.5), 1.0, true);
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double want = lowp::quantize(g[i], lowp::m169());
    CHECK(lowp::ulp_distance(halves.error_buffer()[i], want, lowp::m169()) <= 1.0);
  }
}

TEST_CASE("rank-1 buffer is recovered exactly") {
  Rng rng(2);
  const Tensor u = Tensor::gaussian(12, 1, rng);
  const Tensor v = Tensor::gaussian(20, 1, rng);
  const Tensor e = outer(u, v);
  LowRankState s(12, 20, wide(1, QPolicy::kFixed, 9));
  s.accumulate_error(e, 1.0, true);
  powersgd::compress(s);
  const Tensor d = s.decompressed();
  CHECK(frobenius_norm(sub(d, e)) <= 1e-4 * frobenius_norm(e));
  // P is +-u/|u| and Q is +-|u| v.
  const double un = frobenius_norm(u);
  CHECK(std::fabs(std::fabs(dot(s.p(), u)) / un - 1.0) <= 1e-6);
  CHECK(std::fabs(frobenius_norm(s.q()) - un * frobenius_norm(v)) <= 1e-6 * un * frobenius_norm(v));
}

TEST_CASE("zero buffer compresses to zero") {
  LowRankState s(8, 16, wide(2));
  powersgd::compress(s);
  CHECK(max_abs(s.q()) == 0.0);
  CHECK(max_abs(s.decompressed()) == 0.0);
  CHECK(gram_error(s.p()) <= 1e-12);
}

TEST_CASE("orthonormal buffer gives orthonormal P") {
  Rng rng(3);
  const Tensor basis = powersgd::householder_orthogonalize(Tensor::gaussian(10, 3, rng), 0.0);
  // E is 10 x 3 (transposed to 3 x 10 internally); use E = basis^T padded.
  LowRankState s(3, 10, wide(3));
  s.accumulate_error(transpose(basis), 1.0, true);
  powersgd::compress(s);
  CHECK(gram_error(s.p()) <= 1e-4);
}

TEST_CASE("fixed Q never changes the multiplier") {
  Rng rng(4);
  CompressionConfig c;
  c.rank = 2;
  c.q_seed = 77;
  LowRankState s(8, 12, c);
  const Tensor q0 = s.multiplier();
  for (int t = 0; t < 5; ++t) {
    s.accumulate_error(Tensor::gaussian(8, 12, rng), 1.0, true);
    powersgd::compress(s);
    s.update_error(s.decompressed(), true, true);
    CHECK(s.multiplier() == q0);
  }
  CHECK(s.rounds() == 5);
  LowRankState same(8, 12, c);
  CHECK(same.multiplier() == q0);
}

TEST_CASE("resample and warm start move the multiplier") {
  Rng rng(5);
  for (QPolicy policy : {QPolicy::kResample, QPolicy::kWarmStart}) {
    LowRankState s(8, 12, wide(2, policy, 3));
    const Tensor q0 = s.multiplier();
    s.accumulate_error(Tensor::gaussian(8, 12, rng), 1.0, true);
    powersgd::compress(s);
    CHECK_FALSE(s.multiplier() == q0);
    if (policy == QPolicy::kWarmStart) {
      for (std::size_t c = 0; c < 2; ++c) {
        double n2 = 0;
        for (std::size_t i = 0; i < s.n(); ++i) n2 += s.multiplier()(i, c) * s.multiplier()(i, c);
        CHECK(std::fabs(n2 - 1.0) <= 1e-12);
      }
    }
  }
}

TEST_CASE("decompress") {
  Tensor p(4, 1);
  p.set(0, 0, 1.0);
  Tensor q(6, 1);
  q.set(0, 0, 3.0);
  const Tensor d = powersgd::decompress(p, q, 2.0, false);
  CHECK(d(0, 0) == 1.5);
  CHECK(max_abs(d) == 1.5);
  CHECK(frobenius_norm(d) == 1.5);
  CHECK(max_abs(powersgd::decompress(p, Tensor(6, 1), 1.0, false)) == 0.0);
  CHECK(powersgd::decompress(p, q, 1.0, true).rows() == 6);
  CHECK_THROWS_AS(powersgd::decompress(p, Tensor(6, 2), 1.0, false), std::invalid_argument);
}

TEST_CASE("error update decision table") {
  Rng rng(6);
  const Tensor e = Tensor::gaussian(6, 9, rng);
  LowRankState s(6, 9, wide(2));
  s.accumulate_error(e, 1.0, true);
  powersgd::compress(s);
  const Tensor d = s.decompressed();
  LowRankState a = s;
  a.update_error(divided(d, 2.0), true, true);
  CHECK(max_abs_diff(a.error_buffer(), sub(e, divided(d, 2.0))) <= 1e-15);
  LowRankState b = s;
  b.update_error(d, false, true);
  CHECK(b.error_buffer() == s.error_buffer());
  LowRankState c = s;
  c.update_error(d, false, false);
  CHECK(max_abs(c.error_buffer()) == 0.0);
}

TEST_CASE("householder orthogonalization") {
  Rng rng(7);
  const Tensor ortho = powersgd::householder_orthogonalize(Tensor::gaussian(9, 3, rng), 0.0);
  const Tensor again = powersgd::householder_orthogonalize(ortho, 0.0);
  for (std::size_t c = 0; c < 3; ++c) {
    double same = 0;
    for (std::size_t i = 0; i < 9; ++i) same += ortho(i, c) * again(i, c);
    CHECK(std::fabs(std::fabs(same) - 1.0) <= 1e-12);
  }
  const Tensor from_zero = powersgd::householder_orthogonalize(Tensor(7, 3), 1e-6);
  CHECK(max_abs_diff(from_zero, Tensor::eye(7, 3)) <= 1e-12);
  for (int trial = 0; trial < 20; ++trial) {
    const Tensor p = Tensor::gaussian(16, 4, rng);
    const Tensor q = powersgd::householder_orthogonalize(p, 1e-6);
    CHECK(gram_error(q) < 1e-6);
    Tensor reg = p;
    for (std::size_t j = 0; j < 4; ++j) reg.set(j, j, reg(j, j) + 1e-6);
    CHECK(projection_residual(q, reg) < 1e-6);
    CHECK(powersgd::householder_orthogonalize(p, 1e-6) == q);
  }
  CHECK_THROWS_AS(powersgd::householder_orthogonalize(Tensor(2, 3), 1e-6), std::invalid_argument);
}

TEST_CASE("orthogonality and norm identity after compression") {
  Rng rng(8);
  for (int trial = 0; trial < 50; ++trial) {
    CompressionConfig c;
    c.rank = 1 + rng.below(4);
    c.q_seed = trial;
    LowRankState s(12, 30, c);
    s.accumulate_error(Tensor::gaussian(12, 30, rng, 0.5), 1.0, true);
    powersgd::compress(s);
    CHECK(gram_error(s.p()) < 1e-4);
    // Norm identity in wide precision with the stored P.
    const Tensor p = s.p().untagged();
    const Tensor q = s.q().untagged();
    const double lhs = frobenius_norm(matmul(p, q, false, true));
    const double rhs = frobenius_norm(q);
    CHECK(std::fabs(lhs - rhs) <= 1e-5 * rhs + 1e-300);
  }
}

TEST_CASE("error feedback on a constant gradient") {
  // Sum of transmitted gradients is T G - E_T, so the running-average error
  // is exactly |E_T| / (T |G|).
  for (QPolicy policy : {QPolicy::kWarmStart, QPolicy::kResample}) {
    CAPTURE(powersgd::q_policy_name(policy));
    for (std::uint64_t seed = 1; seed <= 5; ++seed) {
      Rng rng(seed);
      const Tensor g = Tensor::gaussian(32, 64, rng);
      LowRankState s(32, 64, wide(4, policy, seed));
      Tensor sum(32, 64);
      std::vector<double> err;
      for (int t = 1; t <= 100; ++t) {
        s.accumulate_error(g, 1.0, true);
        powersgd::compress(s);
        const Tensor d = s.decompressed();
        axpy(1.0, d, sum);
        s.update_error(d, true, true);
        const double avg_err =
            frobenius_norm(sub(divided(sum, t), g)) / frobenius_norm(g);
        const double identity =
            frobenius_norm(s.error_buffer_original()) / (t * frobenius_norm(g));
        REQUIRE(std::fabs(avg_err - identity) <= 1e-9);
        err.push_back(avg_err);
      }
      CHECK(err[99] < 0.05);
      CHECK(err[99] < err[49]);
      CHECK(err[49] < err[9]);
    }
  }
}

TEST_CASE("fixed Q keeps the sum identity on a constant gradient") {
  Rng rng(10);
  const Tensor g = Tensor::gaussian(32, 64, rng);
  LowRankState s(32, 64, wide(4, QPolicy::kFixed, 4));
  Tensor sum(32, 64);
  for (int t = 1; t <= 50; ++t) {
    s.accumulate_error(g, 1.0, true);
    powersgd::compress(s);
    const Tensor d = s.decompressed();
    CHECK(all_finite(d));
    axpy(1.0, d, sum);
    s.update_error(d, true, true);
  }
  const Tensor expect = sub(scaled(g, 50.0), s.error_buffer_original());
  CHECK(max_abs_diff(sum, expect) <= 1e-9 * max_abs(expect));
}

TEST_CASE("decompressed gradients depend on buffers only through their mean") {
  // Two machines with equal multipliers; P is averaged, Q summed.
  Rng rng(11);
  const std::size_t machines = 3;
  auto round = [&](std::vector<LowRankState>& st) {
    std::vector<Tensor> ps;
    for (auto& s : st) ps.push_back(s.compute_p());
    Tensor mean = ps[0];
    for (std::size_t i = 1; i < ps.size(); ++i) mean = add(mean, ps[i]);
    mean = divided(mean, static_cast<double>(ps.size()));
    for (auto& s : st) s.set_p(mean);
    Tensor qsum = st[0].compute_q();
    for (std::size_t i = 1; i < st.size(); ++i) qsum = add(qsum, st[i].compute_q());
    for (auto& s : st) s.set_q(qsum);
    const Tensor d = st[0].decompressed();
    for (auto& s : st) s.update_error(divided(d, static_cast<double>(st.size())), true, true);
    return d;
  };
  std::vector<LowRankState> a(machines, LowRankState(10, 14, wide(2, QPolicy::kFixed, 5)));
  for (auto& s : a) s.accumulate_error(Tensor::gaussian(10, 14, rng), 1.0, true);
  std::vector<LowRankState> b = a;
  Tensor sum = a[0].error_buffer_original();
  for (std::size_t i = 1; i < machines; ++i) sum = add(sum, a[i].error_buffer_original());
  for (auto& s : b) s.set_error_buffer(divided(sum, static_cast<double>(machines)));
  for (int t = 0; t < 10; ++t) {
    std::vector<Tensor> grads;
    for (std::size_t i = 0; i < machines; ++i) grads.push_back(Tensor::gaussian(10, 14, rng));
    for (std::size_t i = 0; i < machines; ++i) {
      a[i].accumulate_error(grads[i], 1.0, true);
      b[i].accumulate_error(grads[i], 1.0, true);
    }
    const Tensor da = round(a);
    const Tensor db = round(b);
    for (std::size_t e = 0; e < da.size(); ++e) {
      CHECK(lowp::ulp_distance(da[e], db[e], lowp::m169()) <= 1.0);
    }
  }
}
