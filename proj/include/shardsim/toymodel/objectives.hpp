// Copyright 2026 The shardsim Authors
// SPDX-License-Identifier: Apache-2.0

// Relaxation, likelihood and loss functions for the toy models, each with
// the derivatives the explicit backward passes need.

#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "shardsim/rng.hpp"

namespace shardsim::toymodel {

struct RelaxationConfig {
  double temperature = 1.0;
  double kl_weight = 0.0;
  std::size_t vocab = 8192;
  bool argmax_mode = false;

  void validate() const;
};

std::vector<double> softmax(std::span<const double> logits);

// -log(-log(U)) with U uniform on (0, 1).
double gumbel_noise(Rng& rng);
std::vector<double> gumbel_softmax(std::span<const double> logits, double tau, Rng& rng);
std::vector<double> gumbel_softmax_with_noise(std::span<const double> logits,
                                              std::span<const double> noise,
                                              double tau);
// Gradient with respect to the logits given y = gumbel_softmax(...) and
// dL/dy (noise held fixed).
std::vector<double> gumbel_softmax_backward(std::span<const double> y,
                                            std::span<const double> grad_y,
                                            double tau);
// Index of the first maximum; no noise is added.
std::size_t tokenize_argmax(std::span<const double> logits);

struct LogitLaplaceParams {
  double mu = 0.0;
  double ln_b = 0.0;
  double epsilon = 0.1;
};

// Maps a pixel in [0, 255] to ((1 - 2 eps) x / 255 + eps), inside (eps, 1 - eps).
double phi(double x, double epsilon = 0.1);
double phi_inv(double y, double epsilon = 0.1);
// Density on (0, 1): exp(-|logit(y) - mu| / b) / (2 b y (1 - y)).
double logit_laplace_pdf(double y, double mu, double b);

struct NllWithGrad {
  double value = 0.0;
  double d_mu = 0.0;
  double d_ln_b = 0.0;
};

// -ln f(phi(x) | mu, exp(ln_b)). Throws std::invalid_argument for pixels
// outside [0, 255].
double logit_laplace_nll(double x, double mu, double ln_b, double epsilon = 0.1);
NllWithGrad logit_laplace_nll_grad(double x, double mu, double ln_b,
                                   double epsilon = 0.1);
// Pixel value predicted by mu (ln b is ignored).
double reconstruct(double mu, double epsilon = 0.1);

// (recon_nll_sum + beta kl_sum) / pixel_count.
double elb(double recon_nll_sum, double kl_sum, double beta,
           std::size_t pixel_count, std::size_t grid_positions);
// beta * grid_positions / pixel_count, computed as beta / (pixels / grid)
// when the ratio is integral.
double effective_kl_weight(double beta, std::size_t pixel_count,
                           std::size_t grid_positions);

// KL(softmax(logits) || uniform over K) and its gradient.
double categorical_kl_uniform(std::span<const double> logits,
                              std::span<double> grad_logits = {});

// text/8 + 7 image/8
double weighted_ce(double text_ce_mean, double image_ce_mean);

// -log softmax(logits)[target]; writes d/dlogits when grad is non-empty.
double cross_entropy(std::span<const double> logits, std::size_t target,
                     std::span<double> grad = {});

}  // namespace shardsim::toymodel
