// Copyright 2026 The shardsim Authors
// SPDX-License-Identifier: Apache-2.0

#include "shardsim/harness/tasks.hpp"

#include <limits>
#include <stdexcept>

#include "shardsim/lowp.hpp"
#include "shardsim/rng.hpp"

namespace shardsim::harness {
namespace {

constexpr std::uint64_t kTruthStream = 0x7275;
constexpr std::uint64_t kEvalStream = 0x6576;
constexpr std::uint64_t kTrainStream = 0x7472;

std::uint64_t batch_seed(std::uint64_t seed, std::int64_t step, std::size_t data_index) {
  return derive_seed({seed, kTrainStream, static_cast<std::uint64_t>(step), data_index});
}

}  // namespace

LinregTask::LinregTask(LinregConfig config, std::size_t batch, std::uint64_t seed)
    : cfg_(config), batch_(batch), seed_(seed) {
  toymodel::ParamInfo w;
  w.name = "w";
  w.rows = cfg_.features;
  w.cols = cfg_.outputs;
  w.resblock = 0;
  w.compressed = true;
  w.shard_axis = 1;
  w.weight_decay = false;
  w.init = toymodel::ParamInit::kZeros;
  infos_.push_back(w);
  Rng truth(derive_seed({seed_, kTruthStream}));
  w_true_ = Tensor::gaussian(cfg_.features, cfg_.outputs, truth);
  make_batch(derive_seed({seed_, kEvalStream}), cfg_.eval_samples, eval_x_, eval_y_);
}

void LinregTask::make_batch(std::uint64_t seed, std::size_t n, Tensor& x, Tensor& y) const {
  Rng rng(seed);
  x = Tensor::gaussian(n, cfg_.features, rng);
  y = matmul(x, w_true_);
  for (double& v : y.mutable_values()) v += cfg_.noise * rng.normal();
}

std::vector<Tensor> LinregTask::init_params(std::uint64_t seed) const {
  return toymodel::init_params(infos_, seed);
}

double LinregTask::mse(const Tensor& w, const Tensor& x, const Tensor& y) {
  const Tensor r = sub(matmul(x, w), y);
  return squared_norm(r) / static_cast<double>(r.size());
}

TaskGradients LinregTask::loss_and_grads(std::span<const Tensor> params, std::int64_t step,
                                         std::size_t data_index, double loss_multiplier,
                                         std::span<const double> scales,
                                         const toymodel::BackwardOptions& options) const {
  if (params.size() != 1 || scales.size() != 1) {
    throw std::invalid_argument("LinregTask: expects one parameter and one scale");
  }
  Tensor x, y;
  make_batch(batch_seed(seed_, step, data_index), batch_, x, y);
  const Tensor r = sub(matmul(x, params[0]), y);
  TaskGradients out;
  out.loss = squared_norm(r) / static_cast<double>(r.size());
  const double coeff = 2.0 * loss_multiplier / static_cast<double>(r.size());
  Tensor g = scaled(matmul(x, r, true, false), coeff * scales[0] / options.grad_divisor);
  if (options.fp16) g = g.with_format(lowp::fp16()).untagged();
  if (options.inject_nonfinite_block == 0 && g.size() > 0) {
    g.mutable_data()[0] = std::numeric_limits<double>::infinity();
  }
  out.block_finite = {all_finite(g)};
  out.grads.push_back(std::move(g));
  return out;
}

double LinregTask::eval_loss(std::span<const Tensor> params) const {
  return mse(params[0], eval_x_, eval_y_);
}

std::vector<toymodel::TokenSequence> synthetic_sequences(
    const toymodel::TransformerConfig& config, std::size_t count, std::uint64_t seed) {
  const toymodel::SequenceLayout& layout = config.layout;
  const std::size_t cells = layout.grid_h * layout.grid_w;
  Rng rng(seed);
  std::vector<toymodel::TokenSequence> out(count);
  for (toymodel::TokenSequence& s : out) {
    const std::size_t len =
        layout.text_len < 2 ? layout.text_len : 2 + rng.below(layout.text_len - 1);
    s.text.resize(len);
    for (auto& t : s.text) t = static_cast<toymodel::Token>(rng.below(config.text_vocab));
    const std::size_t a = static_cast<std::size_t>(s.text.empty() ? 0 : s.text[0]);
    const std::size_t b = static_cast<std::size_t>(s.text.size() < 2 ? 0 : s.text[1]);
    s.image.resize(cells);
    for (std::size_t r = 0; r < layout.grid_h; ++r) {
      for (std::size_t c = 0; c < layout.grid_w; ++c) {
        std::size_t tok = (7 * a + (b + 1) * r + 3 * c) % config.image_vocab;
        if (rng.uniform() < 0.1) tok = rng.below(config.image_vocab);
        s.image[r * layout.grid_w + c] = static_cast<toymodel::Token>(tok);
      }
    }
  }
  return out;
}

TransformerTask::TransformerTask(toymodel::TransformerConfig config, std::size_t batch,
                                 std::uint64_t seed, bool fp16)
    : model_(config), batch_(batch), seed_(seed), fp16_(fp16) {
  eval_set_ = synthetic_sequences(config, 64, derive_seed({seed_, kEvalStream}));
}

std::vector<Tensor> TransformerTask::init_params(std::uint64_t seed) const {
  return model_.init_params(seed);
}

TaskGradients TransformerTask::loss_and_grads(std::span<const Tensor> params,
                                              std::int64_t step, std::size_t data_index,
                                              double loss_multiplier,
                                              std::span<const double> scales,
                                              const toymodel::BackwardOptions& options) const {
  const auto batch =
      synthetic_sequences(model_.config(), batch_, batch_seed(seed_, step, data_index));
  toymodel::BackwardOptions opts = options;
  opts.fp16 = options.fp16 && fp16_;
  toymodel::ModelGradients g = model_.loss_and_grads(params, batch, loss_multiplier, scales, opts);
  TaskGradients out;
  out.loss = g.loss.loss;
  out.grads = std::move(g.grads);
  out.block_finite = std::move(g.block_finite);
  return out;
}

double TransformerTask::eval_loss(std::span<const Tensor> params) const {
  return model_.loss(params, eval_set_, false).loss;
}

std::shared_ptr<const Task> make_task(const RunConfig& cfg) {
  if (cfg.task == TaskKind::kLinreg) {
    return std::make_shared<LinregTask>(cfg.linreg, cfg.batch_per_gpu, cfg.seed);
  }
  return std::make_shared<TransformerTask>(cfg.transformer, cfg.batch_per_gpu, cfg.seed,
                                           cfg.mixed_precision);
}

}  // namespace shardsim::harness
