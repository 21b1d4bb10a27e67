// Copyright 2026 The shardsim Authors
// SPDX-License-Identifier: Apache-2.0

#include "shardsim/toymodel/objectives.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace shardsim::toymodel {

void RelaxationConfig::validate() const {
  if (!(temperature > 0)) throw std::invalid_argument("temperature must be > 0");
  if (!(kl_weight >= 0)) throw std::invalid_argument("kl_weight must be >= 0");
  if (vocab < 1) throw std::invalid_argument("vocab must be >= 1");
}

std::vector<double> softmax(std::span<const double> logits) {
  std::vector<double> out(logits.size());
  if (logits.empty()) return out;
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (std::size_t i = 0; i < logits.size(); ++i) {
    out[i] = std::exp(logits[i] - mx);
    z += out[i];
  }
  for (double& v : out) v /= z;
  return out;
}

double gumbel_noise(Rng& rng) { return -std::log(-std::log(rng.uniform_open())); }

std::vector<double> gumbel_softmax_with_noise(std::span<const double> logits,
                                              std::span<const double> noise,
                                              double tau) {
  if (!(tau > 0)) throw std::invalid_argument("gumbel_softmax: tau must be > 0");
  if (noise.size() != logits.size()) throw std::invalid_argument("gumbel_softmax: noise size");
  std::vector<double> s(logits.size());
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = (logits[i] + noise[i]) / tau;
  return softmax(s);
}

std::vector<double> gumbel_softmax(std::span<const double> logits, double tau, Rng& rng) {
  std::vector<double> noise(logits.size());
  for (double& g : noise) g = gumbel_noise(rng);
  return gumbel_softmax_with_noise(logits, noise, tau);
}

std::vector<double> gumbel_softmax_backward(std::span<const double> y,
                                            std::span<const double> grad_y,
                                            double tau) {
  double inner = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) inner += y[i] * grad_y[i];
  std::vector<double> g(y.size());
  for (std::size_t i = 0; i < y.size(); ++i) g[i] = y[i] * (grad_y[i] - inner) / tau;
  return g;
}

std::size_t tokenize_argmax(std::span<const double> logits) {
  if (logits.empty()) throw std::invalid_argument("tokenize_argmax: empty logits");
  return static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) -
                                  logits.begin());
}

double phi(double x, double epsilon) { return (1.0 - 2.0 * epsilon) * x / 255.0 + epsilon; }

double phi_inv(double y, double epsilon) {
  return (y - epsilon) * 255.0 / (1.0 - 2.0 * epsilon);
}

double logit_laplace_pdf(double y, double mu, double b) {
  if (y <= 0.0 || y >= 1.0) return 0.0;
  const double l = std::log(y) - std::log1p(-y);
  return std::exp(-std::fabs(l - mu) / b) / (2.0 * b * y * (1.0 - y));
}

NllWithGrad logit_laplace_nll_grad(double x, double mu, double ln_b, double epsilon) {
  if (!(x >= 0.0 && x <= 255.0)) {
    throw std::invalid_argument("logit_laplace_nll: pixel outside [0, 255]");
  }
  const double y = phi(x, epsilon);
  const double l = std::log(y) - std::log1p(-y);
  const double b = std::exp(ln_b);
  const double r = l - mu;
  NllWithGrad out;
  out.value = std::numbers::ln2 + ln_b + std::log(y) + std::log1p(-y) + std::fabs(r) / b;
  const double sgn = r > 0 ? 1.0 : (r < 0 ? -1.0 : 0.0);
  out.d_mu = -sgn / b;
  out.d_ln_b = 1.0 - std::fabs(r) / b;
  return out;
}

double logit_laplace_nll(double x, double mu, double ln_b, double epsilon) {
  return logit_laplace_nll_grad(x, mu, ln_b, epsilon).value;
}

double reconstruct(double mu, double epsilon) {
  return phi_inv(1.0 / (1.0 + std::exp(-mu)), epsilon);
}

double effective_kl_weight(double beta, std::size_t pixel_count,
                           std::size_t grid_positions) {
  if (pixel_count == 0 || grid_positions == 0) {
    throw std::invalid_argument("effective_kl_weight: counts must be > 0");
  }
  if (pixel_count % grid_positions == 0) {
    return beta / static_cast<double>(pixel_count / grid_positions);
  }
  return beta * static_cast<double>(grid_positions) / static_cast<double>(pixel_count);
}

double elb(double recon_nll_sum, double kl_sum, double beta,
           std::size_t pixel_count, std::size_t grid_positions) {
  if (pixel_count == 0 || grid_positions == 0) {
    throw std::invalid_argument("elb: counts must be > 0");
  }
  return (recon_nll_sum + beta * kl_sum) / static_cast<double>(pixel_count);
}

double categorical_kl_uniform(std::span<const double> logits, std::span<double> grad_logits) {
  const std::vector<double> q = softmax(logits);
  const double log_k = std::log(static_cast<double>(q.size()));
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - mx);
  const double log_z = mx + std::log(z);
  double kl = 0.0;
  std::vector<double> log_q(q.size());
  for (std::size_t i = 0; i < q.size(); ++i) {
    log_q[i] = logits[i] - log_z;
    kl += q[i] * (log_q[i] + log_k);
  }
  if (!grad_logits.empty()) {
    // d/dl_j sum_i q_i (log q_i + log K) = q_j (log q_j + log K - kl)
    for (std::size_t j = 0; j < q.size(); ++j) {
      grad_logits[j] = q[j] * (log_q[j] + log_k - kl);
    }
  }
  return kl;
}

double weighted_ce(double text_ce_mean, double image_ce_mean) {
  return text_ce_mean / 8.0 + 7.0 * image_ce_mean / 8.0;
}

double cross_entropy(std::span<const double> logits, std::size_t target,
                     std::span<double> grad) {
  if (target >= logits.size()) throw std::out_of_range("cross_entropy: target out of range");
  const double mx = *std::max_element(logits.begin(), logits.end());
  double z = 0.0;
  for (double l : logits) z += std::exp(l - mx);
  const double log_z = mx + std::log(z);
  if (!grad.empty()) {
    for (std::size_t i = 0; i < logits.size(); ++i) grad[i] = std::exp(logits[i] - log_z);
    grad[target] -= 1.0;
  }
  return log_z - logits[target];
}

}  // namespace shardsim::toymodel
