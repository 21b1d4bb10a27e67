// Copyright 2026 The shardsim Authors
// SPDX-License-Identifier: Apache-2.0

// Residual stack with explicit forward and backward passes.
//
// Block k computes x_{k+1} = x_k + f_k(x_k). The identity path x_k stays in
// double precision; with fp16 enabled every tensor on the branch path
// (activations, incoming and intermediate gradients, gradients of
// compressed parameters) is rounded through fp16.
//
// Backward through block k:
//   g      = scale_incoming(dx, s_k)         fp16 branch gradient
//   g_in   = f_k'(g)                         parameter grads as a side effect
//   ok_k   = all parameter grads of block k finite
//   dx    += unscale_outgoing(filter_nonfinite(g_in), s_k)
// Gradients of compressed parameters are returned still multiplied by
// s_k / grad_divisor; gradients of uncompressed parameters are unscaled.

#pragma once

#include <cstddef>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "shardsim/tensor.hpp"
#include "shardsim/toymodel/masks.hpp"

namespace shardsim::toymodel {

enum class ParamInit { kGaussian, kOnes, kZeros };

struct ParamInfo {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  bool is_vector = false;
  int resblock = -1;        // -1 for parameters outside any resblock
  bool compressed = false;  // low-rank compressed matrix vs 32-bit parameter
  int shard_axis = 1;
  bool weight_decay = true;
  ParamInit init = ParamInit::kGaussian;
  double init_std = 0.02;
};

Tensor zeros_for(const ParamInfo& info);
Tensor init_param(const ParamInfo& info, Rng& rng);
// Parameter i is drawn from a stream seeded with derive_seed({seed, i}).
std::vector<Tensor> init_params(std::span<const ParamInfo> infos, std::uint64_t seed);

struct BranchCache {
  std::vector<Tensor> saved;
};

class Branch {
 public:
  virtual ~Branch() = default;
  virtual std::string_view kind() const = 0;
  virtual std::vector<ParamInfo> param_infos(const std::string& prefix,
                                             int resblock) const = 0;
  virtual Tensor forward(std::span<const Tensor> p, const Tensor& x,
                         BranchCache& cache, bool fp16) const = 0;
  // Writes parameter gradients into grad_p (one per parameter) and returns
  // the gradient with respect to the branch input.
  virtual Tensor backward(std::span<const Tensor> p, const BranchCache& cache,
                          const Tensor& grad_y, std::span<Tensor> grad_p,
                          bool fp16) const = 0;
};

// f(x) = x W
class LinearBranch : public Branch {
 public:
  explicit LinearBranch(std::size_t d) : d_(d) {}
  std::string_view kind() const override { return "linear"; }
  std::vector<ParamInfo> param_infos(const std::string& prefix, int resblock) const override;
  Tensor forward(std::span<const Tensor> p, const Tensor& x, BranchCache& cache,
                 bool fp16) const override;
  Tensor backward(std::span<const Tensor> p, const BranchCache& cache, const Tensor& grad_y,
                  std::span<Tensor> grad_p, bool fp16) const override;

 private:
  std::size_t d_;
};

// f(x) = gelu(LN(x) W1 + b1) W2 + b2
class MlpBranch : public Branch {
 public:
  MlpBranch(std::size_t d, std::size_t hidden) : d_(d), hidden_(hidden) {}
  std::string_view kind() const override { return "mlp"; }
  std::vector<ParamInfo> param_infos(const std::string& prefix, int resblock) const override;
  Tensor forward(std::span<const Tensor> p, const Tensor& x, BranchCache& cache,
                 bool fp16) const override;
  Tensor backward(std::span<const Tensor> p, const BranchCache& cache, const Tensor& grad_y,
                  std::span<Tensor> grad_p, bool fp16) const override;

 private:
  std::size_t d_;
  std::size_t hidden_;
};

// Multi-head masked self-attention over the whole sequence. Input rows are
// a batch of sequences laid out back to back, each mask.size() rows long.
// f(x) = concat_h(softmax_mask(Q_h K_h^T / sqrt(d_h)) V_h) W_post with
// Q, K, V = LN(x) W_q, LN(x) W_k, LN(x) W_v.
class AttentionBranch : public Branch {
 public:
  AttentionBranch(std::size_t d, std::size_t heads, MaskMatrix mask);
  std::string_view kind() const override { return "attention"; }
  const MaskMatrix& mask() const { return mask_; }
  std::vector<ParamInfo> param_infos(const std::string& prefix, int resblock) const override;
  Tensor forward(std::span<const Tensor> p, const Tensor& x, BranchCache& cache,
                 bool fp16) const override;
  Tensor backward(std::span<const Tensor> p, const BranchCache& cache, const Tensor& grad_y,
                  std::span<Tensor> grad_p, bool fp16) const override;

 private:
  std::size_t d_;
  std::size_t heads_;
  MaskMatrix mask_;
};

struct StackForward {
  Tensor output;
  std::vector<Tensor> inputs;        // x_k for each block
  std::vector<BranchCache> caches;
};

struct BackwardOptions {
  bool fp16 = false;
  double grad_divisor = 1.0;
  // When >= 0, the incoming branch gradient of this block gets an Inf.
  int inject_nonfinite_block = -1;
};

struct StackBackward {
  Tensor grad_input;
  std::vector<Tensor> param_grads;  // aligned with param_infos()
  std::vector<bool> block_finite;
};

class ResblockStack {
 public:
  ResblockStack() = default;
  ResblockStack(ResblockStack&&) = default;
  ResblockStack& operator=(ResblockStack&&) = default;

  // Parameters of the new block get resblock index `resblock_base + k`.
  void add(std::unique_ptr<Branch> branch, const std::string& prefix);
  void set_resblock_base(int base);

  std::size_t size() const { return blocks_.size(); }
  const Branch& block(std::size_t k) const { return *blocks_[k]; }
  const std::vector<ParamInfo>& param_infos() const { return infos_; }
  std::size_t param_begin(std::size_t k) const { return offsets_[k]; }
  std::size_t param_count(std::size_t k) const { return offsets_[k + 1] - offsets_[k]; }

  StackForward forward(std::span<const Tensor> params, const Tensor& x, bool fp16) const;
  // `scales` holds one gradient scale per block.
  StackBackward backward(std::span<const Tensor> params, const StackForward& fwd,
                         const Tensor& grad_output, std::span<const double> scales,
                         const BackwardOptions& options) const;

 private:
  std::vector<std::unique_ptr<Branch>> blocks_;
  std::vector<std::string> prefixes_;
  std::vector<ParamInfo> infos_;
  std::vector<std::size_t> offsets_{0};
  int resblock_base_ = 0;
};

// Layer normalization over rows with learned gain and bias.
struct LayerNormCache {
  Tensor xhat;
  std::vector<double> inv_sigma;
};
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  LayerNormCache* cache);
// Returns dL/dx and writes gain/bias gradients.
Tensor layer_norm_backward(const Tensor& grad_y, const Tensor& gain,
                           const LayerNormCache& cache, Tensor& grad_gain,
                           Tensor& grad_bias);

double gelu(double a);
double gelu_derivative(double a);

}  // namespace shardsim::toymodel
