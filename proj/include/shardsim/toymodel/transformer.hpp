// Copyright 2026 The shardsim Authors
// SPDX-License-Identifier: Apache-2.0

// Tiny text-to-image-token transformer. Each layer contributes an attention
// resblock (mask kind from layer_mask_kind) followed by an MLP resblock.
// The loss is next-token cross-entropy, averaged separately over text and
// image targets and combined as text/8 + 7 image/8. Targets that are pad
// positions are excluded.

#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <vector>

#include "shardsim/toymodel/embedding.hpp"
#include "shardsim/toymodel/objectives.hpp"
#include "shardsim/toymodel/resblock.hpp"

namespace shardsim::toymodel {

struct TransformerConfig {
  SequenceLayout layout{6, 4, 4};
  std::size_t text_vocab = 32;
  std::size_t image_vocab = 64;
  std::size_t d_model = 32;
  std::size_t layers = 8;
  std::size_t heads = 4;
  std::size_t conv_kernel = 3;
  std::size_t mlp_mult = 4;
  double embed_std = 0.1;

  void validate() const;
};

struct TokenSequence {
  std::vector<Token> text;   // caption, at most text_len tokens
  std::vector<Token> image;  // exactly grid_h * grid_w tokens
};

struct LossBreakdown {
  double loss = 0.0;
  double text_ce = 0.0;
  double image_ce = 0.0;
  std::size_t text_targets = 0;
  std::size_t image_targets = 0;
};

struct ModelGradients {
  LossBreakdown loss;
  std::vector<Tensor> grads;       // aligned with param_infos()
  std::vector<bool> block_finite;  // one flag per resblock
};

class TransformerModel {
 public:
  explicit TransformerModel(TransformerConfig config);

  const TransformerConfig& config() const { return config_; }
  const std::vector<ParamInfo>& param_infos() const { return infos_; }
  std::size_t resblock_count() const { return stack_.size(); }
  const ResblockStack& stack() const { return stack_; }
  std::vector<Tensor> init_params(std::uint64_t seed) const;

  LossBreakdown loss(std::span<const Tensor> params, std::span<const TokenSequence> batch,
                     bool fp16) const;

  // Gradients of loss_multiplier * loss. Compressed parameter grads keep
  // their resblock scale (divided by options.grad_divisor).
  ModelGradients loss_and_grads(std::span<const Tensor> params,
                                std::span<const TokenSequence> batch,
                                double loss_multiplier, std::span<const double> scales,
                                const BackwardOptions& options) const;

 private:
  struct Forward;
  Forward run_forward(std::span<const Tensor> params, std::span<const TokenSequence> batch,
                      bool fp16) const;

  TransformerConfig config_;
  ResblockStack stack_;
  std::vector<ParamInfo> infos_;
  std::size_t stack_begin_ = 0;
  std::size_t head_begin_ = 0;
};

}  // namespace shardsim::toymodel
