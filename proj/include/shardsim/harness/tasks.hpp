// Copyright 2026 The shardsim Authors
// SPDX-License-Identifier: Apache-2.0

// Training tasks driven by the trainer. A task owns its data generator:
// the batch for (step, data_index) is a pure function of the run seed, so
// runs are reproducible and any replica can regenerate its batch.

#pragma once

#include <cstddef>
#include <cstdint>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "shardsim/harness/config.hpp"
#include "shardsim/tensor.hpp"
#include "shardsim/toymodel/resblock.hpp"
#include "shardsim/toymodel/transformer.hpp"

namespace shardsim::harness {

struct TaskGradients {
  double loss = 0.0;  // unmultiplied batch loss
  std::vector<Tensor> grads;
  std::vector<bool> block_finite;
};

class Task {
 public:
  virtual ~Task() = default;
  virtual std::string name() const = 0;
  virtual const std::vector<toymodel::ParamInfo>& param_infos() const = 0;
  virtual std::size_t resblock_count() const = 0;
  virtual std::vector<Tensor> init_params(std::uint64_t seed) const = 0;
  // Gradients of loss_multiplier * loss on the batch for (step, data_index).
  // Compressed grads keep the resblock scale and are divided by
  // options.grad_divisor; other grads are unscaled.
  virtual TaskGradients loss_and_grads(std::span<const Tensor> params, std::int64_t step,
                                       std::size_t data_index, double loss_multiplier,
                                       std::span<const double> scales,
                                       const toymodel::BackwardOptions& options) const = 0;
  // Loss on a fixed held-out set in wide precision.
  virtual double eval_loss(std::span<const Tensor> params) const = 0;
};

// Multi-output least squares: y = x W* + noise, x ~ N(0, I). The single
// parameter W (features x outputs) forms resblock 0 and is compressed.
class LinregTask final : public Task {
 public:
  LinregTask(LinregConfig config, std::size_t batch, std::uint64_t seed);

  std::string name() const override { return "linreg"; }
  const std::vector<toymodel::ParamInfo>& param_infos() const override { return infos_; }
  std::size_t resblock_count() const override { return 1; }
  std::vector<Tensor> init_params(std::uint64_t seed) const override;
  TaskGradients loss_and_grads(std::span<const Tensor> params, std::int64_t step,
                               std::size_t data_index, double loss_multiplier,
                               std::span<const double> scales,
                               const toymodel::BackwardOptions& options) const override;
  double eval_loss(std::span<const Tensor> params) const override;

  const Tensor& true_weights() const { return w_true_; }
  // Mean squared error of x W - y over the batch.
  static double mse(const Tensor& w, const Tensor& x, const Tensor& y);

 private:
  void make_batch(std::uint64_t seed, std::size_t n, Tensor& x, Tensor& y) const;

  LinregConfig cfg_;
  std::size_t batch_;
  std::uint64_t seed_;
  std::vector<toymodel::ParamInfo> infos_;
  Tensor w_true_;
  Tensor eval_x_;
  Tensor eval_y_;
};

// Synthetic captions and image-token grids in which every image token is a
// function of the first two caption tokens and its grid position, with a
// small fraction of tokens replaced by noise.
std::vector<toymodel::TokenSequence> synthetic_sequences(
    const toymodel::TransformerConfig& config, std::size_t count, std::uint64_t seed);

class TransformerTask final : public Task {
 public:
  TransformerTask(toymodel::TransformerConfig config, std::size_t batch, std::uint64_t seed,
                  bool fp16);

  std::string name() const override { return "transformer"; }
  const std::vector<toymodel::ParamInfo>& param_infos() const override {
    return model_.param_infos();
  }
  std::size_t resblock_count() const override { return model_.resblock_count(); }
  std::vector<Tensor> init_params(std::uint64_t seed) const override;
  TaskGradients loss_and_grads(std::span<const Tensor> params, std::int64_t step,
                               std::size_t data_index, double loss_multiplier,
                               std::span<const double> scales,
                               const toymodel::BackwardOptions& options) const override;
  double eval_loss(std::span<const Tensor> params) const override;

  const toymodel::TransformerModel& model() const { return model_; }

 private:
  toymodel::TransformerModel model_;
  std::size_t batch_;
  std::uint64_t seed_;
  bool fp16_;
  std::vector<toymodel::TokenSequence> eval_set_;
};

std::shared_ptr<const Task> make_task(const RunConfig& cfg);

}  // namespace shardsim::harness
