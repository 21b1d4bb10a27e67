// Copyright 2026 The shardsim Authors
// SPDX-License-Identifier: Apache-2.0

#include "shardsim/toymodel/transformer.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace shardsim::toymodel {
namespace {

// Parameter order outside the stack.
enum : std::size_t { kToken, kTextPos, kPad, kImage, kRow, kCol, kEmbedCount };
enum : std::size_t { kFinalGain, kFinalBias, kUnembedText, kUnembedImage, kHeadCount };

ParamInfo table(std::string name, std::size_t rows, std::size_t cols, double std) {
  ParamInfo p;
  p.name = std::move(name);
  p.rows = rows;
  p.cols = cols;
  p.compressed = false;
  p.weight_decay = false;
  p.init_std = std;
  return p;
}

}  // namespace

void TransformerConfig::validate() const {
  layout.validate();
  if (text_vocab < 1 || image_vocab < 1) throw std::invalid_argument("vocab sizes must be >= 1");
  if (layers < 1) throw std::invalid_argument("layers must be >= 1");
  if (heads < 1 || d_model % heads != 0) {
    throw std::invalid_argument("d_model must be divisible by heads");
  }
  if (conv_kernel % 2 == 0 || conv_kernel > 2 * layout.grid_w - 1) {
    throw std::invalid_argument("conv_kernel must be odd and <= 2*grid_w-1");
  }
}

struct TransformerModel::Forward {
  Tensor embedded;
  StackForward stack;
  LayerNormCache final_ln;
  Tensor normed;
  // Per target: row in the batch matrix, target token, is_image.
  std::vector<std::size_t> rows;
  std::vector<Token> targets;
  std::vector<bool> is_image;
};

TransformerModel::TransformerModel(TransformerConfig config) : config_(std::move(config)) {
  config_.validate();
  const auto& l = config_.layout;
  const std::size_t d = config_.d_model;
  const double s = config_.embed_std;
  infos_ = {table("embed.token", config_.text_vocab, d, s),
            table("embed.text_pos", l.text_len, d, s),
            table("embed.pad", l.text_len, d, s),
            table("embed.image", config_.image_vocab, d, s),
            table("embed.row", l.grid_h, d, s),
            table("embed.col", l.grid_w, d, s)};
  for (std::size_t i = 1; i <= config_.layers; ++i) {
    const MaskKind kind = layer_mask_kind(i, config_.layers);
    stack_.add(std::make_unique<AttentionBranch>(d, config_.heads,
                                                 build_mask(kind, l, config_.conv_kernel)),
               "layer" + std::to_string(i) + ".attn");
    stack_.add(std::make_unique<MlpBranch>(d, config_.mlp_mult * d),
               "layer" + std::to_string(i) + ".mlp");
  }
  stack_begin_ = infos_.size();
  for (const ParamInfo& p : stack_.param_infos()) infos_.push_back(p);
  head_begin_ = infos_.size();
  ParamInfo g = table("final_ln.g", d, 1, 0.0);
  g.is_vector = true;
  g.init = ParamInit::kOnes;
  ParamInfo b = table("final_ln.b", d, 1, 0.0);
  b.is_vector = true;
  b.init = ParamInit::kZeros;
  infos_.push_back(g);
  infos_.push_back(b);
  const double us = 1.0 / std::sqrt(static_cast<double>(d));
  infos_.push_back(table("unembed.text", d, config_.text_vocab, us));
  infos_.push_back(table("unembed.image", d, config_.image_vocab, us));
}

std::vector<Tensor> TransformerModel::init_params(std::uint64_t seed) const {
  return toymodel::init_params(infos_, seed);
}

TransformerModel::Forward TransformerModel::run_forward(std::span<const Tensor> params,
                                                        std::span<const TokenSequence> batch,
                                                        bool fp16) const {
  if (params.size() != infos_.size()) throw std::invalid_argument("transformer: param count");
  const auto& l = config_.layout;
  const std::size_t n = l.total_len();
  const std::size_t d = config_.d_model;
  const EmbeddingTables tables{&params[kToken], &params[kTextPos], &params[kPad],
                               &params[kImage], &params[kRow],     &params[kCol]};
  Forward f;
  f.embedded = Tensor(batch.size() * n, d);
  double* e = f.embedded.mutable_data();
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const TokenSequence& seq = batch[b];
    if (seq.image.size() != l.image_len()) {
      throw std::invalid_argument("transformer: image must fill the grid");
    }
    const Tensor one = embed_sequence(seq.text, seq.image, l, tables);
    std::copy(one.values().begin(), one.values().end(), e + b * n * d);
    for (std::size_t t = 0; t + 1 < n; ++t) {
      const std::size_t next = t + 1;
      if (next < l.text_len) {
        if (next >= seq.text.size()) continue;
        f.rows.push_back(b * n + t);
        f.targets.push_back(seq.text[next]);
        f.is_image.push_back(false);
      } else {
        f.rows.push_back(b * n + t);
        f.targets.push_back(seq.image[next - l.text_len]);
        f.is_image.push_back(true);
      }
    }
  }
  f.stack = stack_.forward(params.subspan(stack_begin_, head_begin_ - stack_begin_),
                           f.embedded, fp16);
  f.normed = layer_norm(f.stack.output, params[head_begin_ + kFinalGain],
                        params[head_begin_ + kFinalBias], &f.final_ln);
  return f;
}

LossBreakdown TransformerModel::loss(std::span<const Tensor> params,
                                     std::span<const TokenSequence> batch, bool fp16) const {
  const Forward f = run_forward(params, batch, fp16);
  const Tensor& ut = params[head_begin_ + kUnembedText];
  const Tensor& ui = params[head_begin_ + kUnembedImage];
  const std::size_t d = config_.d_model;
  LossBreakdown out;
  double text_sum = 0.0, image_sum = 0.0;
  std::vector<double> logits;
  for (std::size_t t = 0; t < f.rows.size(); ++t) {
    const Tensor& u = f.is_image[t] ? ui : ut;
    logits.assign(u.cols(), 0.0);
    for (std::size_t c = 0; c < d; ++c) {
      const double h = f.normed(f.rows[t], c);
      for (std::size_t v = 0; v < u.cols(); ++v) logits[v] += h * u(c, v);
    }
    const double ce = cross_entropy(logits, static_cast<std::size_t>(f.targets[t]));
    if (f.is_image[t]) {
      image_sum += ce;
      ++out.image_targets;
    } else {
      text_sum += ce;
      ++out.text_targets;
    }
  }
  out.text_ce = out.text_targets ? text_sum / static_cast<double>(out.text_targets) : 0.0;
  out.image_ce = out.image_targets ? image_sum / static_cast<double>(out.image_targets) : 0.0;
  out.loss = weighted_ce(out.text_ce, out.image_ce);
  return out;
}

ModelGradients TransformerModel::loss_and_grads(std::span<const Tensor> params,
                                                std::span<const TokenSequence> batch,
                                                double loss_multiplier,
                                                std::span<const double> scales,
                                                const BackwardOptions& options) const {
  const Forward f = run_forward(params, batch, options.fp16);
  const std::size_t d = config_.d_model;
  const Tensor& ut = params[head_begin_ + kUnembedText];
  const Tensor& ui = params[head_begin_ + kUnembedImage];

  ModelGradients out;
  out.grads.reserve(infos_.size());
  for (const ParamInfo& p : infos_) out.grads.push_back(zeros_for(p));

  std::size_t text_count = 0, image_count = 0;
  for (bool img : f.is_image) (img ? image_count : text_count) += 1;
  const double text_w = text_count ? loss_multiplier / (8.0 * static_cast<double>(text_count)) : 0.0;
  const double image_w =
      image_count ? loss_multiplier * 7.0 / (8.0 * static_cast<double>(image_count)) : 0.0;

  Tensor grad_normed(f.normed.rows(), d);
  double* gn = grad_normed.mutable_data();
  double* gut = out.grads[head_begin_ + kUnembedText].mutable_data();
  double* gui = out.grads[head_begin_ + kUnembedImage].mutable_data();
  double text_sum = 0.0, image_sum = 0.0;
  std::vector<double> logits, dlogits;
  for (std::size_t t = 0; t < f.rows.size(); ++t) {
    const bool img = f.is_image[t];
    const Tensor& u = img ? ui : ut;
    double* gu = img ? gui : gut;
    const std::size_t vocab = u.cols();
    const std::size_t row = f.rows[t];
    logits.assign(vocab, 0.0);
    dlogits.assign(vocab, 0.0);
    for (std::size_t c = 0; c < d; ++c) {
      const double h = f.normed(row, c);
      for (std::size_t v = 0; v < vocab; ++v) logits[v] += h * u(c, v);
    }
    const double ce = cross_entropy(logits, static_cast<std::size_t>(f.targets[t]), dlogits);
    (img ? image_sum : text_sum) += ce;
    const double w = img ? image_w : text_w;
    for (double& g : dlogits) g *= w;
    for (std::size_t c = 0; c < d; ++c) {
      const double h = f.normed(row, c);
      double acc = 0.0;
      for (std::size_t v = 0; v < vocab; ++v) {
        gu[c * vocab + v] += h * dlogits[v];
        acc += u(c, v) * dlogits[v];
      }
      gn[row * d + c] += acc;
    }
  }
  out.loss.text_targets = text_count;
  out.loss.image_targets = image_count;
  out.loss.text_ce = text_count ? text_sum / static_cast<double>(text_count) : 0.0;
  out.loss.image_ce = image_count ? image_sum / static_cast<double>(image_count) : 0.0;
  out.loss.loss = weighted_ce(out.loss.text_ce, out.loss.image_ce);

  const Tensor grad_stack_out =
      layer_norm_backward(grad_normed, params[head_begin_ + kFinalGain], f.final_ln,
                          out.grads[head_begin_ + kFinalGain], out.grads[head_begin_ + kFinalBias]);
  StackBackward sb = stack_.backward(params.subspan(stack_begin_, head_begin_ - stack_begin_),
                                     f.stack, grad_stack_out, scales, options);
  for (std::size_t i = 0; i < sb.param_grads.size(); ++i) {
    out.grads[stack_begin_ + i] = std::move(sb.param_grads[i]);
  }
  out.block_finite = std::move(sb.block_finite);

  const auto& l = config_.layout;
  const std::size_t n = l.total_len();
  const EmbeddingGrads eg{&out.grads[kToken], &out.grads[kTextPos], &out.grads[kPad],
                          &out.grads[kImage], &out.grads[kRow],     &out.grads[kCol]};
  for (std::size_t b = 0; b < batch.size(); ++b) {
    const Tensor g = slice(sb.grad_input, 0, b * n, n);
    embed_backward(batch[b].text, batch[b].image, l, g, eg);
  }
  return out;
}

}  // namespace shardsim::toymodel
