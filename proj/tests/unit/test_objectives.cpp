// Copyright 2026 The shardsim Authors
// SPDX-License-Identifier: Apache-2.0

#include <boost/math/quadrature/tanh_sinh.hpp>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <vector>

#include "doctest.h"
#include "support/oracles.hpp"
#include "shardsim/rng.hpp"
#include "shardsim/toymodel/objectives.hpp"

using namespace shardsim;
using namespace shardsim::toymodel;

namespace {

double rel_err(double got, double want) {
  return std::fabs(got - want) / std::max(1e-8, std::fabs(want));
}

std::vector<double> random_vec(std::size_t n, Rng& rng, double scale = 1.0) {
  std::vector<double> v(n);
  for (double& x : v) x = scale * rng.normal();
  return v;
}

}  // namespace

TEST_CASE("softmax and gumbel-softmax") {
  const std::vector<double> logits = {1.0, 5.0, 2.0};
  CHECK(tokenize_argmax(logits) == 1);
  CHECK(tokenize_argmax(std::vector<double>{3, 3, 1}) == 0);

  Rng rng(1);
  for (int trial = 0; trial < 100; ++trial) {
    const auto l = random_vec(7, rng, 3.0);
    const auto y = gumbel_softmax(l, 0.3 + rng.uniform(), rng);
    CHECK(std::fabs(std::accumulate(y.begin(), y.end(), 0.0) - 1.0) <= 1e-9);
    for (double v : y) CHECK(v >= 0.0);
  }

  const auto l = random_vec(6, rng);
  std::vector<double> noise(6), shifted(6);
  for (std::size_t i = 0; i < 6; ++i) {
    noise[i] = gumbel_noise(rng);
    shifted[i] = l[i] + noise[i];
  }
  const auto cold = gumbel_softmax_with_noise(l, noise, 1e-4);
  CHECK(cold[tokenize_argmax(shifted)] > 0.999);

  std::vector<double> mean(5, 0.0);
  const std::vector<double> flat(5, 0.0);
  const int draws = 10000;
  for (int i = 0; i < draws; ++i) {
    const auto y = gumbel_softmax(flat, 1.0, rng);
    for (std::size_t k = 0; k < 5; ++k) mean[k] += y[k] / draws;
  }
  for (double m : mean) CHECK(std::fabs(m - 0.2) < 0.01);
}

TEST_CASE("gumbel-softmax backward matches finite differences") {
  Rng rng(2);
  for (int trial = 0; trial < 20; ++trial) {
    const auto l = random_vec(5, rng);
    std::vector<double> noise(5);
    for (double& n : noise) n = gumbel_noise(rng);
    const auto w = random_vec(5, rng);
    const double tau = 0.5 + rng.uniform();
    auto f = [&](const std::vector<double>& x) {
      const auto y = gumbel_softmax_with_noise(x, noise, tau);
      return std::inner_product(y.begin(), y.end(), w.begin(), 0.0);
    };
    const auto y = gumbel_softmax_with_noise(l, noise, tau);
    const auto g = gumbel_softmax_backward(y, w, tau);
    for (std::size_t i = 0; i < 5; ++i) {
      CHECK(rel_err(g[i], oracle::central_difference(f, l, i, 1e-5)) < 1e-4);
    }
  }
}

TEST_CASE("logit-Laplace basics") {
  CHECK(logit_laplace_pdf(0.5, 0.0, 1.0) == doctest::Approx(2.0).epsilon(1e-15));
  CHECK(phi(0) == doctest::Approx(0.1).epsilon(1e-15));
  CHECK(phi(255) == doctest::Approx(0.9).epsilon(1e-15));
  for (double x = 0; x <= 255; x += 0.5) CHECK(std::fabs(phi_inv(phi(x)) - x) <= 1e-12);
  CHECK(logit_laplace_nll(127.5, 0.0, 0.0) == doctest::Approx(-std::log(2.0)).epsilon(1e-12));
  CHECK_THROWS_AS(logit_laplace_nll(-1, 0, 0), std::invalid_argument);
  CHECK_THROWS_AS(logit_laplace_nll(256, 0, 0), std::invalid_argument);
  // Reconstruction ignores ln b and inverts phi(sigmoid(mu)).
  CHECK(reconstruct(0.0) == doctest::Approx(127.5).epsilon(1e-12));
  const double y = phi(40.0);
  CHECK(reconstruct(std::log(y / (1 - y))) == doctest::Approx(40.0).epsilon(1e-12));
}

TEST_CASE("logit-Laplace density integrates to one") {
  boost::math::quadrature::tanh_sinh<double> integrator;
  const double settings[3][2] = {{0.0, 1.0}, {1.0, 0.5}, {-2.0, 2.0}};
  for (const auto& s : settings) {
    const double mu = s[0], b = s[1];
    const double split = 1.0 / (1.0 + std::exp(-mu));
    auto f = [&](double y) { return logit_laplace_pdf(y, mu, b); };
    const double total = integrator.integrate(f, 0.0, split) + integrator.integrate(f, split, 1.0);
    CHECK(std::fabs(total - 1.0) < 1e-6);
  }
}

TEST_CASE("logit-Laplace gradient matches finite differences") {
  Rng rng(3);
  for (int trial = 0; trial < 200; ++trial) {
    const double x = std::floor(rng.uniform() * 256);
    const double mu = 3 * rng.normal(), ln_b = rng.normal();
    const auto g = logit_laplace_nll_grad(x, mu, ln_b);
    CHECK(g.value == doctest::Approx(logit_laplace_nll(x, mu, ln_b)).epsilon(1e-14));
    const double y = phi(x);
    if (std::fabs(std::log(y / (1 - y)) - mu) < 1e-3) continue;  // kink
    const std::vector<double> p = {mu, ln_b};
    auto f = [&](const std::vector<double>& v) { return logit_laplace_nll(x, v[0], v[1]); };
    CHECK(rel_err(g.d_mu, oracle::central_difference(f, p, 0, 1e-6)) < 1e-4);
    CHECK(rel_err(g.d_ln_b, oracle::central_difference(f, p, 1, 1e-6)) < 1e-4);
  }
}

TEST_CASE("evidence bound scaling") {
  CHECK(effective_kl_weight(6.6, 256 * 256 * 3, 32 * 32) == 6.6 / 192);
  for (double beta : {0.5, 1.0, 3.0, 6.6}) {
    CHECK(effective_kl_weight(beta, 256 * 256 * 3, 1024) == beta / 192);
    CHECK(effective_kl_weight(beta, 64, 16) == beta / 4);
  }
  CHECK(elb(100.0, 50.0, 0.0, 64, 16) == 100.0 / 64);
  CHECK(elb(100.0, 50.0, 2.0, 64, 16) == doctest::Approx(200.0 / 64).epsilon(1e-15));
  CHECK(weighted_ce(8, 8) == 8);
  CHECK(weighted_ce(8, 0) == 1);
  CHECK(weighted_ce(0, 8) == 7);
}

TEST_CASE("categorical KL and cross-entropy gradients") {
  Rng rng(4);
  std::vector<double> flat(6, 0.25);
  CHECK(std::fabs(categorical_kl_uniform(flat)) < 1e-14);
  for (int trial = 0; trial < 30; ++trial) {
    const auto l = random_vec(6, rng, 2.0);
    std::vector<double> g(6);
    const double kl = categorical_kl_uniform(l, g);
    CHECK(kl >= 0.0);
    auto f = [](const std::vector<double>& x) { return categorical_kl_uniform(x); };
    for (std::size_t i = 0; i < 6; ++i) {
      CHECK(rel_err(g[i], oracle::central_difference(f, l, i, 1e-6)) < 1e-4);
    }
    const std::size_t target = rng.below(6);
    std::vector<double> gc(6);
    const double ce = cross_entropy(l, target, gc);
    const auto sm = softmax(l);
    CHECK(ce == doctest::Approx(-std::log(sm[target])).epsilon(1e-12));
    auto h = [&](const std::vector<double>& x) { return cross_entropy(x, target); };
    for (std::size_t i = 0; i < 6; ++i) {
      CHECK(rel_err(gc[i], oracle::central_difference(h, l, i, 1e-6)) < 1e-4);
    }
  }
  RelaxationConfig rc;
  rc.temperature = 0.0;
  CHECK_THROWS_AS(rc.validate(), std::invalid_argument);
}
