// Copyright 2026 The shardsim Authors
// SPDX-License-Identifier: Apache-2.0

#include "shardsim/toymodel/resblock.hpp"

#include <cmath>
#include <limits>
#include <numbers>
#include <stdexcept>

#include "shardsim/gradscale.hpp"

namespace shardsim::toymodel {
namespace {

constexpr double kLayerNormEps = 1e-5;

Tensor maybe16(Tensor t, bool fp16) {
  if (!fp16) return t;
  lowp::quantize(t.values(), t.mutable_values(), lowp::fp16());
  return t;
}

// Sum over rows: 1 x cols as a vector tensor.
Tensor column_sums(const Tensor& g) {
  Tensor s = Tensor::vector(g.cols());
  double* o = s.mutable_data();
  for (std::size_t i = 0; i < g.rows(); ++i) {
    for (std::size_t j = 0; j < g.cols(); ++j) o[j] += g(i, j);
  }
  return s;
}

Tensor add_row_vector(const Tensor& x, const Tensor& b) {
  Tensor y = x.untagged();
  double* o = y.mutable_data();
  for (std::size_t i = 0; i < x.rows(); ++i) {
    for (std::size_t j = 0; j < x.cols(); ++j) o[i * x.cols() + j] += b[j];
  }
  return y;
}

ParamInfo matrix_info(std::string name, std::size_t rows, std::size_t cols,
                      int resblock, int shard_axis, double std) {
  ParamInfo p;
  p.name = std::move(name);
  p.rows = rows;
  p.cols = cols;
  p.resblock = resblock;
  p.compressed = true;
  p.shard_axis = shard_axis;
  p.init_std = std;
  return p;
}

ParamInfo vector_info(std::string name, std::size_t n, int resblock, ParamInit init) {
  ParamInfo p;
  p.name = std::move(name);
  p.rows = n;
  p.cols = 1;
  p.is_vector = true;
  p.resblock = resblock;
  p.compressed = false;
  p.shard_axis = 0;
  p.weight_decay = false;
  p.init = init;
  return p;
}

}  // namespace

Tensor zeros_for(const ParamInfo& info) {
  return info.is_vector ? Tensor::vector(info.rows) : Tensor(info.rows, info.cols);
}

Tensor init_param(const ParamInfo& info, Rng& rng) {
  Tensor t = zeros_for(info);
  std::span<double> v = t.mutable_values();
  for (double& x : v) {
    switch (info.init) {
      case ParamInit::kGaussian:
        x = info.init_std * rng.normal();
        break;
      case ParamInit::kOnes:
        x = 1.0;
        break;
      case ParamInit::kZeros:
        x = 0.0;
        break;
    }
  }
  return t;
}

std::vector<Tensor> init_params(std::span<const ParamInfo> infos, std::uint64_t seed) {
  std::vector<Tensor> out;
  out.reserve(infos.size());
  for (std::size_t i = 0; i < infos.size(); ++i) {
    Rng rng(derive_seed({seed, 0x9a7a, static_cast<std::uint64_t>(i)}));
    out.push_back(init_param(infos[i], rng));
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias,
                  LayerNormCache* cache) {
  const std::size_t n = x.rows();
  const std::size_t d = x.cols();
  Tensor xhat(n, d);
  std::vector<double> inv(n);
  double* xh = xhat.mutable_data();
  for (std::size_t i = 0; i < n; ++i) {
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += x(i, j);
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (x(i, j) - mean) * (x(i, j) - mean);
    var /= static_cast<double>(d);
    inv[i] = 1.0 / std::sqrt(var + kLayerNormEps);
    for (std::size_t j = 0; j < d; ++j) xh[i * d + j] = (x(i, j) - mean) * inv[i];
  }
  Tensor y(n, d);
  double* o = y.mutable_data();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < d; ++j) o[i * d + j] = gain[j] * xh[i * d + j] + bias[j];
  }
  if (cache) {
    cache->xhat = std::move(xhat);
    cache->inv_sigma = std::move(inv);
  }
  return y;
}

Tensor layer_norm_backward(const Tensor& grad_y, const Tensor& gain,
                           const LayerNormCache& cache, Tensor& grad_gain,
                           Tensor& grad_bias) {
  const std::size_t n = grad_y.rows();
  const std::size_t d = grad_y.cols();
  grad_gain = Tensor::vector(d);
  grad_bias = Tensor::vector(d);
  double* gg = grad_gain.mutable_data();
  double* gb = grad_bias.mutable_data();
  Tensor dx(n, d);
  double* o = dx.mutable_data();
  std::vector<double> dxhat(d);
  for (std::size_t i = 0; i < n; ++i) {
    double mean_d = 0.0;
    double mean_dx = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      const double g = grad_y(i, j);
      const double xh = cache.xhat(i, j);
      gg[j] += g * xh;
      gb[j] += g;
      dxhat[j] = g * gain[j];
      mean_d += dxhat[j];
      mean_dx += dxhat[j] * xh;
    }
    mean_d /= static_cast<double>(d);
    mean_dx /= static_cast<double>(d);
    for (std::size_t j = 0; j < d; ++j) {
      o[i * d + j] = cache.inv_sigma[i] * (dxhat[j] - mean_d - cache.xhat(i, j) * mean_dx);
    }
  }
  return dx;
}

double gelu(double a) {
  const double c = std::sqrt(2.0 / std::numbers::pi);
  return 0.5 * a * (1.0 + std::tanh(c * (a + 0.044715 * a * a * a)));
}

double gelu_derivative(double a) {
  const double c = std::sqrt(2.0 / std::numbers::pi);
  const double t = std::tanh(c * (a + 0.044715 * a * a * a));
  return 0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * a * a);
}

// ---- LinearBranch ----

std::vector<ParamInfo> LinearBranch::param_infos(const std::string& prefix,
                                                 int resblock) const {
  return {matrix_info(prefix + ".w", d_, d_, resblock, 1, 1.0 / std::sqrt(static_cast<double>(d_)))};
}

Tensor LinearBranch::forward(std::span<const Tensor> p, const Tensor& x, BranchCache& cache,
                             bool fp16) const {
  const Tensor xin = maybe16(x.untagged(), fp16);
  cache.saved = {xin};
  return maybe16(matmul(xin, p[0]), fp16);
}

Tensor LinearBranch::backward(std::span<const Tensor> p, const BranchCache& cache,
                              const Tensor& grad_y, std::span<Tensor> grad_p,
                              bool fp16) const {
  grad_p[0] = matmul(cache.saved[0], grad_y, true, false);
  return maybe16(matmul(grad_y, p[0], false, true), fp16);
}

// ---- MlpBranch ----
// params: ln_g, ln_b, fc1, fc1_b, fc2, fc2_b
// saved:  xhat, inv_sigma, h, a, u

std::vector<ParamInfo> MlpBranch::param_infos(const std::string& prefix, int resblock) const {
  const double s1 = 1.0 / std::sqrt(static_cast<double>(d_));
  const double s2 = 1.0 / std::sqrt(static_cast<double>(hidden_));
  return {vector_info(prefix + ".ln_g", d_, resblock, ParamInit::kOnes),
          vector_info(prefix + ".ln_b", d_, resblock, ParamInit::kZeros),
          matrix_info(prefix + ".fc1", d_, hidden_, resblock, 1, s1),
          vector_info(prefix + ".fc1_b", hidden_, resblock, ParamInit::kZeros),
          matrix_info(prefix + ".fc2", hidden_, d_, resblock, 0, s2),
          vector_info(prefix + ".fc2_b", d_, resblock, ParamInit::kZeros)};
}

Tensor MlpBranch::forward(std::span<const Tensor> p, const Tensor& x, BranchCache& cache,
                          bool fp16) const {
  LayerNormCache ln;
  const Tensor h = maybe16(layer_norm(x, p[0], p[1], &ln), fp16);
  const Tensor a = maybe16(add_row_vector(matmul(h, p[2]), p[3]), fp16);
  Tensor u = a.untagged();
  for (double& v : u.mutable_values()) v = gelu(v);
  u = maybe16(std::move(u), fp16);
  Tensor y = maybe16(add_row_vector(matmul(u, p[4]), p[5]), fp16);
  cache.saved = {ln.xhat, Tensor::vector(ln.inv_sigma), h, a, u};
  return y;
}

Tensor MlpBranch::backward(std::span<const Tensor> p, const BranchCache& cache,
                           const Tensor& grad_y, std::span<Tensor> grad_p,
                           bool fp16) const {
  const Tensor& h = cache.saved[2];
  const Tensor& a = cache.saved[3];
  const Tensor& u = cache.saved[4];
  grad_p[4] = matmul(u, grad_y, true, false);
  grad_p[5] = column_sums(grad_y);
  const Tensor gu = maybe16(matmul(grad_y, p[4], false, true), fp16);
  Tensor ga = gu.untagged();
  std::span<double> gav = ga.mutable_values();
  for (std::size_t i = 0; i < gav.size(); ++i) gav[i] *= gelu_derivative(a[i]);
  ga = maybe16(std::move(ga), fp16);
  grad_p[2] = matmul(h, ga, true, false);
  grad_p[3] = column_sums(ga);
  const Tensor gh = maybe16(matmul(ga, p[2], false, true), fp16);
  LayerNormCache ln{cache.saved[0], std::vector<double>(cache.saved[1].values().begin(),
                                                        cache.saved[1].values().end())};
  Tensor gx = layer_norm_backward(gh, p[0], ln, grad_p[0], grad_p[1]);
  return maybe16(std::move(gx), fp16);
}

// ---- AttentionBranch ----
// params: ln_g, ln_b, wq, wk, wv, wpost
// saved:  xhat, inv_sigma, h, q, k, v, o, then one probability matrix per head

AttentionBranch::AttentionBranch(std::size_t d, std::size_t heads, MaskMatrix mask)
    : d_(d), heads_(heads), mask_(std::move(mask)) {
  if (heads == 0 || d % heads != 0) {
    throw std::invalid_argument("AttentionBranch: d must be divisible by heads");
  }
}

std::vector<ParamInfo> AttentionBranch::param_infos(const std::string& prefix,
                                                    int resblock) const {
  const double s = 1.0 / std::sqrt(static_cast<double>(d_));
  return {vector_info(prefix + ".ln_g", d_, resblock, ParamInit::kOnes),
          vector_info(prefix + ".ln_b", d_, resblock, ParamInit::kZeros),
          matrix_info(prefix + ".wq", d_, d_, resblock, 1, s),
          matrix_info(prefix + ".wk", d_, d_, resblock, 1, s),
          matrix_info(prefix + ".wv", d_, d_, resblock, 1, s),
          matrix_info(prefix + ".wpost", d_, d_, resblock, 1, s)};
}

Tensor AttentionBranch::forward(std::span<const Tensor> p, const Tensor& x,
                                BranchCache& cache, bool fp16) const {
  const std::size_t total = x.rows();
  const std::size_t n = mask_.size();
  if (total % n != 0) {
    throw std::invalid_argument("AttentionBranch: rows must be a multiple of the sequence length");
  }
  const std::size_t batch = total / n;
  const std::size_t dh = d_ / heads_;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  LayerNormCache ln;
  const Tensor h = maybe16(layer_norm(x, p[0], p[1], &ln), fp16);
  const Tensor q = maybe16(matmul(h, p[2]), fp16);
  const Tensor k = maybe16(matmul(h, p[3]), fp16);
  const Tensor v = maybe16(matmul(h, p[4]), fp16);

  Tensor o(total, d_);
  double* op = o.mutable_data();
  std::vector<Tensor> probs;
  probs.reserve(batch * heads_);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t base = b * n;
    for (std::size_t hd = 0; hd < heads_; ++hd) {
      const std::size_t off = hd * dh;
      Tensor a(n, n);
      double* ap = a.mutable_data();
      for (std::size_t i = 0; i < n; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j) {
          if (!mask_.allowed(i, j)) continue;
          double s = 0.0;
          for (std::size_t c = 0; c < dh; ++c) s += q(base + i, off + c) * k(base + j, off + c);
          ap[i * n + j] = s * inv_sqrt;
          mx = std::max(mx, ap[i * n + j]);
        }
        double z = 0.0;
        for (std::size_t j = 0; j < n; ++j) {
          if (!mask_.allowed(i, j)) continue;
          ap[i * n + j] = std::exp(ap[i * n + j] - mx);
          z += ap[i * n + j];
        }
        for (std::size_t j = 0; j < n; ++j) {
          ap[i * n + j] = mask_.allowed(i, j) ? ap[i * n + j] / z : 0.0;
        }
      }
      a = maybe16(std::move(a), fp16);
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < dh; ++c) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += a(i, j) * v(base + j, off + c);
          op[(base + i) * d_ + off + c] = s;
        }
      }
      probs.push_back(std::move(a));
    }
  }
  o = maybe16(std::move(o), fp16);
  Tensor y = maybe16(matmul(o, p[5]), fp16);
  cache.saved = {ln.xhat, Tensor::vector(ln.inv_sigma), h, q, k, v, o};
  for (Tensor& a : probs) cache.saved.push_back(std::move(a));
  return y;
}

Tensor AttentionBranch::backward(std::span<const Tensor> p, const BranchCache& cache,
                                 const Tensor& grad_y, std::span<Tensor> grad_p,
                                 bool fp16) const {
  const Tensor& h = cache.saved[2];
  const Tensor& q = cache.saved[3];
  const Tensor& k = cache.saved[4];
  const Tensor& v = cache.saved[5];
  const Tensor& o = cache.saved[6];
  const std::size_t total = h.rows();
  const std::size_t n = mask_.size();
  const std::size_t batch = total / n;
  const std::size_t dh = d_ / heads_;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));

  grad_p[5] = matmul(o, grad_y, true, false);
  const Tensor go = maybe16(matmul(grad_y, p[5], false, true), fp16);

  Tensor gq(total, d_), gk(total, d_), gv(total, d_);
  double* gqp = gq.mutable_data();
  double* gkp = gk.mutable_data();
  double* gvp = gv.mutable_data();
  std::vector<double> da(n * n), ds(n * n);
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t base = b * n;
    for (std::size_t hd = 0; hd < heads_; ++hd) {
      const Tensor& a = cache.saved[7 + b * heads_ + hd];
      const std::size_t off = hd * dh;
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
          double s = 0.0;
          if (mask_.allowed(i, j)) {
            for (std::size_t c = 0; c < dh; ++c) s += go(base + i, off + c) * v(base + j, off + c);
          }
          da[i * n + j] = s;
        }
      }
      for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t c = 0; c < dh; ++c) {
          double s = 0.0;
          for (std::size_t i = 0; i < n; ++i) s += a(i, j) * go(base + i, off + c);
          gvp[(base + j) * d_ + off + c] = s;
        }
      }
      for (std::size_t i = 0; i < n; ++i) {
        double inner = 0.0;
        for (std::size_t j = 0; j < n; ++j) inner += a(i, j) * da[i * n + j];
        for (std::size_t j = 0; j < n; ++j) {
          ds[i * n + j] = a(i, j) * (da[i * n + j] - inner) * inv_sqrt;
        }
      }
      for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < dh; ++c) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += ds[i * n + j] * k(base + j, off + c);
          gqp[(base + i) * d_ + off + c] = s;
        }
      }
      for (std::size_t j = 0; j < n; ++j) {
        for (std::size_t c = 0; c < dh; ++c) {
          double s = 0.0;
          for (std::size_t i = 0; i < n; ++i) s += ds[i * n + j] * q(base + i, off + c);
          gkp[(base + j) * d_ + off + c] = s;
        }
      }
    }
  }
  gq = maybe16(std::move(gq), fp16);
  gk = maybe16(std::move(gk), fp16);
  gv = maybe16(std::move(gv), fp16);
  grad_p[2] = matmul(h, gq, true, false);
  grad_p[3] = matmul(h, gk, true, false);
  grad_p[4] = matmul(h, gv, true, false);
  Tensor gh = matmul(gq, p[2], false, true);
  gh = add(gh, matmul(gk, p[3], false, true));
  gh = add(gh, matmul(gv, p[4], false, true));
  gh = maybe16(std::move(gh), fp16);
  LayerNormCache ln{cache.saved[0], std::vector<double>(cache.saved[1].values().begin(),
                                                        cache.saved[1].values().end())};
  Tensor gx = layer_norm_backward(gh, p[0], ln, grad_p[0], grad_p[1]);
  return maybe16(std::move(gx), fp16);
}

// ---- ResblockStack ----

void ResblockStack::add(std::unique_ptr<Branch> branch, const std::string& prefix) {
  const int index = resblock_base_ + static_cast<int>(blocks_.size());
  for (ParamInfo& info : branch->param_infos(prefix, index)) infos_.push_back(std::move(info));
  offsets_.push_back(infos_.size());
  prefixes_.push_back(prefix);
  blocks_.push_back(std::move(branch));
}

void ResblockStack::set_resblock_base(int base) {
  const int shift = base - resblock_base_;
  for (ParamInfo& info : infos_) info.resblock += shift;
  resblock_base_ = base;
}

StackForward ResblockStack::forward(std::span<const Tensor> params, const Tensor& x,
                                    bool fp16) const {
  if (params.size() != infos_.size()) throw std::invalid_argument("stack forward: param count");
  StackForward f;
  f.inputs.reserve(blocks_.size());
  f.caches.resize(blocks_.size());
  Tensor cur = x.untagged();
  for (std::size_t k = 0; k < blocks_.size(); ++k) {
    f.inputs.push_back(cur);
    const Tensor y = blocks_[k]->forward(params.subspan(offsets_[k], param_count(k)), cur,
                                         f.caches[k], fp16);
    cur = shardsim::add(cur, y);
  }
  f.output = std::move(cur);
  return f;
}

StackBackward ResblockStack::backward(std::span<const Tensor> params, const StackForward& fwd,
                                      const Tensor& grad_output,
                                      std::span<const double> scales,
                                      const BackwardOptions& options) const {
  if (scales.size() != blocks_.size()) throw std::invalid_argument("stack backward: scale count");
  StackBackward b;
  b.param_grads.resize(infos_.size());
  b.block_finite.assign(blocks_.size(), true);
  Tensor dx = grad_output.untagged();
  for (std::size_t kk = blocks_.size(); kk-- > 0;) {
    const double s = scales[kk];
    Tensor g = options.fp16 ? gradscale::scale_incoming(dx, s) : scaled(dx, s);
    if (options.inject_nonfinite_block == static_cast<int>(kk) && g.size() > 0) {
      g.set(0, std::numeric_limits<double>::infinity());
    }
    std::span<Tensor> gp(b.param_grads.data() + offsets_[kk], param_count(kk));
    Tensor g_in = blocks_[kk]->backward(params.subspan(offsets_[kk], param_count(kk)),
                                        fwd.caches[kk], g, gp, options.fp16);
    bool finite = true;
    for (std::size_t i = 0; i < gp.size(); ++i) {
      const ParamInfo& info = infos_[offsets_[kk] + i];
      finite = finite && all_finite(gp[i]);
      if (info.compressed) {
        Tensor t = divided(gp[i], options.grad_divisor);
        gp[i] = options.fp16 ? t.with_format(lowp::fp16()).untagged() : std::move(t);
      } else {
        gp[i] = divided(gp[i], s);
      }
    }
    b.block_finite[kk] = finite;
    dx = shardsim::add(dx, gradscale::unscale_outgoing(gradscale::filter_nonfinite(g_in), s));
  }
  b.grad_input = std::move(dx);
  return b;
}

}  // namespace shardsim::toymodel
