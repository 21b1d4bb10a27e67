// Copyright 2026 The shardsim Authors
// SPDX-License-Identifier: Apache-2.0

// Dense toy discrete VAE on small grayscale images.
//
// encoder: phi(x) -> gelu(. W1 + b1) -> . W2 + b2 = logits (grid^2 x K)
// sample:  per grid position, gumbel_softmax(logits, tau)  (or one-hot
//          of argmax(logits + noise) for hard samples)
// decoder: z -> gelu(. W3 + b3) -> . W4 + b4 = (mu, ln b) per pixel
// loss:    (sum logit-Laplace NLL + beta sum KL(q || uniform)) / pixels

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "shardsim/rng.hpp"
#include "shardsim/tensor.hpp"
#include "shardsim/toymodel/resblock.hpp"

namespace shardsim::toymodel {

struct DvaeConfig {
  std::size_t image_side = 8;
  std::size_t grid_side = 4;
  std::size_t vocab = 16;
  std::size_t hidden = 64;
  double epsilon = 0.1;

  void validate() const;
  std::size_t pixels() const { return image_side * image_side; }
  std::size_t positions() const { return grid_side * grid_side; }
};

struct DvaeLoss {
  double loss = 0.0;       // normalized objective
  double recon_nll = 0.0;  // summed over the batch
  double kl = 0.0;         // summed over the batch
  std::vector<Tensor> grads;
};

struct ElbEstimate {
  double relaxed = 0.0;  // negative ELB per pixel with relaxed samples
  double hard = 0.0;     // negative ELB per pixel with categorical samples
  double gap() const;
};

class ToyDvae {
 public:
  explicit ToyDvae(DvaeConfig config);

  const DvaeConfig& config() const { return config_; }
  const std::vector<ParamInfo>& param_infos() const { return infos_; }
  std::vector<Tensor> init_params(std::uint64_t seed) const;

  // images: batch x pixels with values in [0, 255]. `noise` holds one
  // gumbel draw per (image, position, code), batch x (positions * vocab).
  DvaeLoss loss_and_grads(std::span<const Tensor> params, const Tensor& images,
                          const Tensor& noise, double tau, double beta) const;
  double loss(std::span<const Tensor> params, const Tensor& images, const Tensor& noise,
              double tau, double beta) const;

  // ELB estimates (beta = 1) averaged over `samples` noise draws, using the
  // same draws for the relaxed and the hard estimate.
  ElbEstimate evaluate(std::span<const Tensor> params, const Tensor& images, double tau,
                       std::uint64_t seed, std::size_t samples) const;

  Tensor encoder_logits(std::span<const Tensor> params, const Tensor& images) const;
  Tensor draw_noise(std::size_t batch, Rng& rng) const;

 private:
  struct Pass;
  Pass forward(std::span<const Tensor> params, const Tensor& images, const Tensor& noise,
               double tau, bool hard) const;

  DvaeConfig config_;
  std::vector<ParamInfo> infos_;
};

// Procedurally generated patterns: bars, boxes, diagonals and gradients
// with random placement and intensity plus mild pixel noise.
Tensor make_pattern_batch(std::size_t batch, std::size_t side, Rng& rng);

}  // namespace shardsim::toymodel
