// Copyright 2026 The shardsim Authors
// SPDX-License-Identifier: Apache-2.0

#include "shardsim/toymodel/dvae.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "shardsim/toymodel/objectives.hpp"

namespace shardsim::toymodel {
namespace {

enum : std::size_t { kEnc1, kEnc1B, kEnc2, kEnc2B, kDec1, kDec1B, kDec2, kDec2B };

ParamInfo dense(std::string name, std::size_t rows, std::size_t cols) {
  ParamInfo p;
  p.name = std::move(name);
  p.rows = rows;
  p.cols = cols;
  p.init_std = 1.0 / std::sqrt(static_cast<double>(rows));
  return p;
}

ParamInfo bias(std::string name, std::size_t n) {
  ParamInfo p;
  p.name = std::move(name);
  p.rows = n;
  p.cols = 1;
  p.is_vector = true;
  p.weight_decay = false;
  p.init = ParamInit::kZeros;
  return p;
}

Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
  Tensor y = matmul(x, w);
  double* o = y.mutable_data();
  for (std::size_t i = 0; i < y.rows(); ++i) {
    for (std::size_t j = 0; j < y.cols(); ++j) o[i * y.cols() + j] += b[j];
  }
  return y;
}

Tensor apply_gelu(const Tensor& a) {
  Tensor u = a.untagged();
  for (double& v : u.mutable_values()) v = gelu(v);
  return u;
}

// grad through gelu, in place on `g`
void gelu_back(Tensor& g, const Tensor& pre) {
  std::span<double> gv = g.mutable_values();
  for (std::size_t i = 0; i < gv.size(); ++i) gv[i] *= gelu_derivative(pre[i]);
}

Tensor column_sums(const Tensor& g) {
  Tensor s = Tensor::vector(g.cols());
  double* o = s.mutable_data();
  for (std::size_t i = 0; i < g.rows(); ++i) {
    for (std::size_t j = 0; j < g.cols(); ++j) o[j] += g(i, j);
  }
  return s;
}

}  // namespace

void DvaeConfig::validate() const {
  if (image_side < 1 || grid_side < 1 || vocab < 2 || hidden < 1) {
    throw std::invalid_argument("DvaeConfig: invalid sizes");
  }
  if (!(epsilon > 0 && epsilon < 0.5)) throw std::invalid_argument("DvaeConfig: epsilon in (0, 0.5)");
}

double ElbEstimate::gap() const { return std::fabs(relaxed - hard); }

ToyDvae::ToyDvae(DvaeConfig config) : config_(config) {
  config_.validate();
  const std::size_t P = config_.pixels();
  const std::size_t GK = config_.positions() * config_.vocab;
  const std::size_t H = config_.hidden;
  infos_ = {dense("enc.w1", P, H),  bias("enc.b1", H),  dense("enc.w2", H, GK),
            bias("enc.b2", GK),     dense("dec.w1", GK, H), bias("dec.b1", H),
            dense("dec.w2", H, 2 * P), bias("dec.b2", 2 * P)};
  infos_[kDec1].init_std = 1.0 / std::sqrt(static_cast<double>(config_.positions()));
}

std::vector<Tensor> ToyDvae::init_params(std::uint64_t seed) const {
  return toymodel::init_params(infos_, seed);
}

struct ToyDvae::Pass {
  Tensor input;    // phi(x)
  Tensor enc_pre;  // before gelu
  Tensor enc_h;
  Tensor logits;
  Tensor z;        // samples, batch x (positions * vocab)
  Tensor dec_pre;
  Tensor dec_h;
  Tensor out;      // batch x 2P
};

Tensor ToyDvae::draw_noise(std::size_t batch, Rng& rng) const {
  Tensor n(batch, config_.positions() * config_.vocab);
  for (double& v : n.mutable_values()) v = gumbel_noise(rng);
  return n;
}

Tensor ToyDvae::encoder_logits(std::span<const Tensor> params, const Tensor& images) const {
  Tensor input = images.untagged();
  for (double& v : input.mutable_values()) v = phi(v, config_.epsilon);
  const Tensor h = apply_gelu(affine(input, params[kEnc1], params[kEnc1B]));
  return affine(h, params[kEnc2], params[kEnc2B]);
}

ToyDvae::Pass ToyDvae::forward(std::span<const Tensor> params, const Tensor& images,
                               const Tensor& noise, double tau, bool hard) const {
  if (params.size() != infos_.size()) throw std::invalid_argument("ToyDvae: param count");
  if (images.cols() != config_.pixels()) throw std::invalid_argument("ToyDvae: image size");
  const std::size_t K = config_.vocab;
  const std::size_t G = config_.positions();
  Pass p;
  p.input = images.untagged();
  for (double& v : p.input.mutable_values()) v = phi(v, config_.epsilon);
  p.enc_pre = affine(p.input, params[kEnc1], params[kEnc1B]);
  p.enc_h = apply_gelu(p.enc_pre);
  p.logits = affine(p.enc_h, params[kEnc2], params[kEnc2B]);
  p.z = Tensor(images.rows(), G * K);
  double* z = p.z.mutable_data();
  for (std::size_t b = 0; b < images.rows(); ++b) {
    for (std::size_t g = 0; g < G; ++g) {
      const std::size_t off = b * G * K + g * K;
      std::span<const double> l(p.logits.data() + off, K);
      std::span<const double> e(noise.data() + off, K);
      if (hard) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < K; ++k) {
          if (l[k] + e[k] > l[best] + e[best]) best = k;
        }
        z[off + best] = 1.0;
      } else {
        const std::vector<double> y = gumbel_softmax_with_noise(l, e, tau);
        std::copy(y.begin(), y.end(), z + off);
      }
    }
  }
  p.dec_pre = affine(p.z, params[kDec1], params[kDec1B]);
  p.dec_h = apply_gelu(p.dec_pre);
  p.out = affine(p.dec_h, params[kDec2], params[kDec2B]);
  return p;
}

double ToyDvae::loss(std::span<const Tensor> params, const Tensor& images, const Tensor& noise,
                     double tau, double beta) const {
  const Pass p = forward(params, images, noise, tau, false);
  const std::size_t P = config_.pixels();
  const std::size_t K = config_.vocab;
  const std::size_t G = config_.positions();
  double recon = 0.0, kl = 0.0;
  for (std::size_t b = 0; b < images.rows(); ++b) {
    for (std::size_t i = 0; i < P; ++i) {
      recon += logit_laplace_nll(images(b, i), p.out(b, i), p.out(b, P + i), config_.epsilon);
    }
    for (std::size_t g = 0; g < G; ++g) {
      kl += categorical_kl_uniform({p.logits.data() + b * G * K + g * K, K});
    }
  }
  return elb(recon, kl, beta, images.rows() * P, images.rows() * G);
}

DvaeLoss ToyDvae::loss_and_grads(std::span<const Tensor> params, const Tensor& images,
                                 const Tensor& noise, double tau, double beta) const {
  const Pass p = forward(params, images, noise, tau, false);
  const std::size_t B = images.rows();
  const std::size_t P = config_.pixels();
  const std::size_t K = config_.vocab;
  const std::size_t G = config_.positions();
  const double norm = 1.0 / static_cast<double>(B * P);

  DvaeLoss out;
  out.grads.reserve(infos_.size());
  for (const ParamInfo& info : infos_) out.grads.push_back(zeros_for(info));

  Tensor d_out(B, 2 * P);
  double* dout = d_out.mutable_data();
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t i = 0; i < P; ++i) {
      const NllWithGrad r =
          logit_laplace_nll_grad(images(b, i), p.out(b, i), p.out(b, P + i), config_.epsilon);
      out.recon_nll += r.value;
      dout[b * 2 * P + i] = r.d_mu * norm;
      dout[b * 2 * P + P + i] = r.d_ln_b * norm;
    }
  }
  out.grads[kDec2] = matmul(p.dec_h, d_out, true, false);
  out.grads[kDec2B] = column_sums(d_out);
  Tensor d_dec = matmul(d_out, params[kDec2], false, true);
  gelu_back(d_dec, p.dec_pre);
  out.grads[kDec1] = matmul(p.z, d_dec, true, false);
  out.grads[kDec1B] = column_sums(d_dec);
  const Tensor d_z = matmul(d_dec, params[kDec1], false, true);

  Tensor d_logits(B, G * K);
  double* dl = d_logits.mutable_data();
  std::vector<double> kl_grad(K);
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t g = 0; g < G; ++g) {
      const std::size_t off = b * G * K + g * K;
      const std::vector<double> back = gumbel_softmax_backward(
          {p.z.data() + off, K}, {d_z.data() + off, K}, tau);
      out.kl += categorical_kl_uniform({p.logits.data() + off, K}, kl_grad);
      for (std::size_t k = 0; k < K; ++k) dl[off + k] = back[k] + beta * norm * kl_grad[k];
    }
  }
  out.grads[kEnc2] = matmul(p.enc_h, d_logits, true, false);
  out.grads[kEnc2B] = column_sums(d_logits);
  Tensor d_enc = matmul(d_logits, params[kEnc2], false, true);
  gelu_back(d_enc, p.enc_pre);
  out.grads[kEnc1] = matmul(p.input, d_enc, true, false);
  out.grads[kEnc1B] = column_sums(d_enc);

  out.loss = elb(out.recon_nll, out.kl, beta, B * P, B * G);
  return out;
}

ElbEstimate ToyDvae::evaluate(std::span<const Tensor> params, const Tensor& images, double tau,
                              std::uint64_t seed, std::size_t samples) const {
  const std::size_t B = images.rows();
  const std::size_t P = config_.pixels();
  const std::size_t K = config_.vocab;
  const std::size_t G = config_.positions();
  Rng rng(seed);
  const Tensor logits = encoder_logits(params, images);
  double kl = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    for (std::size_t g = 0; g < G; ++g) {
      kl += categorical_kl_uniform({logits.data() + b * G * K + g * K, K});
    }
  }
  double soft_recon = 0.0, hard_recon = 0.0;
  for (std::size_t s = 0; s < samples; ++s) {
    const Tensor noise = draw_noise(B, rng);
    for (bool hard : {false, true}) {
      const Pass p = forward(params, images, noise, tau, hard);
      double r = 0.0;
      for (std::size_t b = 0; b < B; ++b) {
        for (std::size_t i = 0; i < P; ++i) {
          r += logit_laplace_nll(images(b, i), p.out(b, i), p.out(b, P + i), config_.epsilon);
        }
      }
      (hard ? hard_recon : soft_recon) += r;
    }
  }
  const double denom = static_cast<double>(B * P);
  const double n = static_cast<double>(samples);
  ElbEstimate e;
  e.relaxed = (soft_recon / n + kl) / denom;
  e.hard = (hard_recon / n + kl) / denom;
  return e;
}

Tensor make_pattern_batch(std::size_t batch, std::size_t side, Rng& rng) {
  Tensor images(batch, side * side);
  double* o = images.mutable_data();
  const auto s = static_cast<long>(side);
  for (std::size_t b = 0; b < batch; ++b) {
    double* img = o + b * side * side;
    const double bg = 20.0 + 40.0 * rng.uniform();
    const double fg = 160.0 + 90.0 * rng.uniform();
    for (std::size_t i = 0; i < side * side; ++i) img[i] = bg;
    const std::uint64_t kind = rng.below(5);
    const long a = static_cast<long>(rng.below(side));
    const long w = 1 + static_cast<long>(rng.below(std::max<std::size_t>(1, side / 2)));
    for (long r = 0; r < s; ++r) {
      for (long c = 0; c < s; ++c) {
        bool on = false;
        double value = fg;
        switch (kind) {
          case 0: on = r >= a && r < a + w; break;
          case 1: on = c >= a && c < a + w; break;
          case 2: on = r >= a / 2 && r < a / 2 + w + 1 && c >= a / 2 && c < a / 2 + w + 1; break;
          case 3: on = std::labs(r - c - (a - s / 2)) <= w / 2; break;
          default:
            on = true;
            value = bg + (fg - bg) * static_cast<double>(c + r) / static_cast<double>(2 * s - 2);
            break;
        }
        if (on) img[r * s + c] = value;
      }
    }
    for (std::size_t i = 0; i < side * side; ++i) {
      img[i] = std::clamp(img[i] + 6.0 * rng.normal(), 0.0, 255.0);
    }
  }
  return images;
}

}  // namespace shardsim::toymodel
