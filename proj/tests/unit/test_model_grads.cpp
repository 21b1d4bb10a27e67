// Copyright 2026 The shardsim Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <vector>

#include "doctest.h"
#include "shardsim/rng.hpp"
#include "shardsim/toymodel/dvae.hpp"
#include "shardsim/toymodel/resblock.hpp"
#include "shardsim/toymodel/transformer.hpp"

using namespace shardsim;
using namespace shardsim::toymodel;

namespace {

using LossFn = std::function<double(const std::vector<Tensor>&)>;

// Worst relative error over `per_tensor` random coordinates of every
// parameter, using central differences with step h.
double fd_check(const LossFn& f, std::vector<Tensor> params, const std::vector<Tensor>& grads,
                std::size_t per_tensor, double h, Rng& rng) {
  double worst = 0.0;
  for (std::size_t t = 0; t < params.size(); ++t) {
    for (std::size_t s = 0; s < per_tensor; ++s) {
      const std::size_t i = rng.below(params[t].size());
      const double orig = params[t][i];
      params[t].set(i, orig + h);
      const double up = f(params);
      params[t].set(i, orig - h);
      const double down = f(params);
      params[t].set(i, orig);
      const double fd = (up - down) / (2 * h);
      const double err = std::fabs(grads[t][i] - fd) / std::max(std::fabs(fd), 1e-4);
      worst = std::max(worst, err);
    }
  }
  return worst;
}

ResblockStack mlp_stack(std::size_t d, std::size_t blocks) {
  ResblockStack stack;
  for (std::size_t k = 0; k < blocks; ++k) {
    stack.add(std::make_unique<MlpBranch>(d, 2 * d), "mlp" + std::to_string(k));
  }
  return stack;
}

}  // namespace

TEST_CASE("linear resblock gradient is analytic") {
  Rng rng(1);
  ResblockStack stack;
  stack.add(std::make_unique<LinearBranch>(4), "lin");
  auto params = init_params(stack.param_infos(), 3);
  const Tensor x = Tensor::gaussian(5, 4, rng);
  const Tensor up = Tensor::gaussian(5, 4, rng);
  const auto fwd = stack.forward(params, x, false);
  CHECK(max_abs_diff(fwd.output, add(x, matmul(x, params[0]))) <= 1e-15);
  const std::vector<double> scales = {1.0};
  const auto bwd = stack.backward(params, fwd, up, scales, {});
  CHECK(max_abs_diff(bwd.param_grads[0], matmul(x, up, true, false)) <= 1e-10);
  CHECK(max_abs_diff(bwd.grad_input, add(up, matmul(up, params[0], false, true))) <= 1e-10);
  CHECK(bwd.block_finite[0]);
}

TEST_CASE("layer norm and gelu") {
  Rng rng(2);
  const Tensor x = Tensor::gaussian(3, 6, rng, 2.0);
  const Tensor gain = Tensor::gaussian(1, 6, rng), bias = Tensor::gaussian(1, 6, rng);
  const Tensor w = Tensor::gaussian(3, 6, rng);
  LayerNormCache cache;
  layer_norm(x, gain, bias, &cache);
  Tensor gg(1, 6), gb(1, 6);
  const Tensor gx = layer_norm_backward(w, gain, cache, gg, gb);
  auto f = [&](const Tensor& xx) { return dot(w, layer_norm(xx, gain, bias, nullptr)); };
  for (std::size_t i = 0; i < x.size(); ++i) {
    Tensor p = x, m = x;
    p.set(i, x[i] + 1e-6);
    m.set(i, x[i] - 1e-6);
    CHECK(gx[i] == doctest::Approx((f(p) - f(m)) / 2e-6).epsilon(1e-6));
  }
  for (double a = -4; a <= 4; a += 0.25) {
    const double fd = (gelu(a + 1e-6) - gelu(a - 1e-6)) / 2e-6;
    CHECK(gelu_derivative(a) == doctest::Approx(fd).epsilon(1e-7));
  }
  CHECK(gelu(0.0) == 0.0);
}

TEST_CASE("mlp stack matches finite differences") {
  Rng rng(3);
  const auto stack = mlp_stack(6, 2);
  const auto params = init_params(stack.param_infos(), 5);
  std::vector<Tensor> big = params;
  for (auto& p : big) p = scaled(p, 20.0);  // leave the near-linear regime
  const Tensor x = Tensor::gaussian(4, 6, rng);
  const Tensor up = Tensor::gaussian(4, 6, rng);
  const std::vector<double> scales = {1.0, 1.0};
  for (const std::vector<Tensor>* ps : {&params, static_cast<const std::vector<Tensor>*>(&big)}) {
    const auto fwd = stack.forward(*ps, x, false);
    const auto bwd = stack.backward(*ps, fwd, up, scales, {});
    LossFn f = [&](const std::vector<Tensor>& p) { return dot(up, stack.forward(p, x, false).output); };
    CHECK(fd_check(f, *ps, bwd.param_grads, 8, 1e-4, rng) < 1e-4);
  }
}

TEST_CASE("scaled backward returns scaled compressed gradients") {
  Rng rng(4);
  const auto stack = mlp_stack(6, 2);
  const auto params = init_params(stack.param_infos(), 6);
  const Tensor x = Tensor::gaussian(4, 6, rng);
  const Tensor up = Tensor::gaussian(4, 6, rng);
  const auto fwd = stack.forward(params, x, false);
  const std::vector<double> ones = {1.0, 1.0}, scales = {8.0, 32.0};
  const auto base = stack.backward(params, fwd, up, ones, {});
  BackwardOptions opt;
  opt.grad_divisor = 2.0;
  const auto sc = stack.backward(params, fwd, up, scales, opt);
  CHECK(max_abs_diff(sc.grad_input, base.grad_input) <= 1e-12 * max_abs(base.grad_input));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& info = stack.param_infos()[i];
    const double factor = info.compressed ? scales[info.resblock] / 2.0 : 1.0;
    CHECK(max_abs_diff(sc.param_grads[i], scaled(base.param_grads[i], factor)) <=
          1e-12 * factor * (max_abs(base.param_grads[i]) + 1e-300));
  }
}

TEST_CASE("nonfinite branch gradient is filtered") {
  Rng rng(5);
  const auto stack = mlp_stack(6, 3);
  const auto params = init_params(stack.param_infos(), 7);
  const Tensor x = Tensor::gaussian(4, 6, rng);
  const Tensor up = Tensor::gaussian(4, 6, rng);
  const auto fwd = stack.forward(params, x, true);
  const std::vector<double> scales = {1024.0, 1024.0, 1024.0};
  BackwardOptions opt;
  opt.fp16 = true;
  opt.inject_nonfinite_block = 1;
  const auto bwd = stack.backward(params, fwd, up, scales, opt);
  CHECK(bwd.block_finite[0]);
  CHECK_FALSE(bwd.block_finite[1]);
  CHECK(bwd.block_finite[2]);
  CHECK(all_finite(bwd.grad_input));
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (stack.param_infos()[i].resblock != 1) CHECK(all_finite(bwd.param_grads[i]));
  }
}

TEST_CASE("attention and transformer match finite differences") {
  TransformerConfig cfg;
  cfg.layout = {3, 2, 3};
  cfg.text_vocab = 7;
  cfg.image_vocab = 9;
  cfg.d_model = 8;
  cfg.layers = 2;
  cfg.heads = 2;
  cfg.embed_std = 0.5;
  const TransformerModel model(cfg);
  auto params = model.init_params(11);
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (model.param_infos()[i].init == ParamInit::kGaussian) params[i] = scaled(params[i], 10.0);
  }
  Rng rng(6);
  std::vector<TokenSequence> batch(2);
  for (auto& s : batch) {
    for (std::size_t t = 0; t < 2; ++t) s.text.push_back(static_cast<Token>(rng.below(7)));
    for (std::size_t t = 0; t < 6; ++t) s.image.push_back(static_cast<Token>(rng.below(9)));
  }
  batch[1].text.push_back(3);
  const std::vector<double> scales(model.resblock_count(), 1.0);
  const auto mg = model.loss_and_grads(params, batch, 1.0, scales, {});
  const auto lb = model.loss(params, batch, false);
  CHECK(mg.loss.loss == doctest::Approx(lb.loss).epsilon(1e-12));
  CHECK(lb.loss == doctest::Approx(weighted_ce(lb.text_ce, lb.image_ce)).epsilon(1e-14));
  CHECK(lb.text_targets == 1 + 2);
  CHECK(lb.image_targets == 12);
  LossFn f = [&](const std::vector<Tensor>& p) { return model.loss(p, batch, false).loss; };
  CHECK(fd_check(f, params, mg.grads, 6, 1e-5, rng) < 1e-4);
}

TEST_CASE("dvae matches finite differences") {
  DvaeConfig cfg;
  cfg.image_side = 4;
  cfg.grid_side = 2;
  cfg.vocab = 5;
  cfg.hidden = 8;
  const ToyDvae model(cfg);
  auto params = model.init_params(13);
  Rng rng(7);
  const Tensor images = make_pattern_batch(3, 4, rng);
  const Tensor noise = model.draw_noise(3, rng);
  for (double beta : {0.0, 1.5}) {
    const auto lg = model.loss_and_grads(params, images, noise, 0.7, beta);
    CHECK(lg.loss == doctest::Approx(model.loss(params, images, noise, 0.7, beta)).epsilon(1e-12));
    CHECK(lg.loss == doctest::Approx(elb(lg.recon_nll, lg.kl, beta, 3 * 16, 4)).epsilon(1e-12));
    LossFn f = [&](const std::vector<Tensor>& p) { return model.loss(p, images, noise, 0.7, beta); };
    CHECK(fd_check(f, params, lg.grads, 8, 1e-5, rng) < 1e-4);
  }
  const auto e = model.evaluate(params, images, 0.5, 3, 4);
  CHECK(std::isfinite(e.relaxed));
  CHECK(std::isfinite(e.hard));
  CHECK(e.gap() == doctest::Approx(std::fabs(e.hard - e.relaxed)));
  CHECK(images.rows() == 3);
  for (double v : images.values()) CHECK((v >= 0 && v <= 255));
}
