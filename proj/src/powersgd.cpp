// Copyright 2026 The shardsim Authors
// SPDX-License-Identifier: Apache-2.0

#include "shardsim/powersgd.hpp"

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

namespace shardsim::powersgd {

std::string_view q_policy_name(QPolicy policy) {
  switch (policy) {
    case QPolicy::kFixed:
      return "fixed";
    case QPolicy::kWarmStart:
      return "warm_start";
    case QPolicy::kResample:
      return "resample";
  }
  return "fixed";
}

QPolicy parse_q_policy(std::string_view name) {
  if (name == "fixed") return QPolicy::kFixed;
  if (name == "warm_start" || name == "warm-start" || name == "warm") {
    return QPolicy::kWarmStart;
  }
  if (name == "resample") return QPolicy::kResample;
  throw std::invalid_argument("unknown q_policy: " + std::string(name));
}

void CompressionConfig::validate() const {
  if (rank < 1) throw std::invalid_argument("compression rank must be >= 1");
  if (!(epsilon > 0.0)) throw std::invalid_argument("epsilon must be > 0");
  for (double s : {p_scale, q_scale}) {
    int e = 0;
    if (!(s > 0.0) || std::frexp(s, &e) != 0.5) {
      throw std::invalid_argument("p_scale and q_scale must be powers of two");
    }
  }
}

bool orient(std::size_t rows, std::size_t cols) { return rows > cols; }

Tensor householder_orthogonalize(const Tensor& p, double epsilon) {
  const std::size_t m = p.rows();
  const std::size_t r = p.cols();
  if (m < r) {
    throw std::invalid_argument("householder_orthogonalize: rows < cols");
  }
  std::vector<double> a(p.values().begin(), p.values().end());
  for (std::size_t j = 0; j < r; ++j) a[j * r + j] += epsilon;

  std::vector<std::vector<double>> reflectors(r);
  std::vector<double> betas(r, 0.0);
  std::vector<double> diag(r, 0.0);
  for (std::size_t j = 0; j < r; ++j) {
    double norm_sq = 0.0;
    for (std::size_t i = j; i < m; ++i) norm_sq += a[i * r + j] * a[i * r + j];
    const double alpha = std::sqrt(norm_sq);
    std::vector<double>& v = reflectors[j];
    v.assign(m - j, 0.0);
    if (alpha == 0.0) {
      diag[j] = 0.0;
      continue;
    }
    const double x0 = a[j * r + j];
    const double sign = x0 >= 0.0 ? 1.0 : -1.0;
    for (std::size_t i = j; i < m; ++i) v[i - j] = a[i * r + j];
    v[0] += sign * alpha;
    double vv = 0.0;
    for (double x : v) vv += x * x;
    betas[j] = 2.0 / vv;
    for (std::size_t c = j; c < r; ++c) {
      double s = 0.0;
      for (std::size_t i = j; i < m; ++i) s += v[i - j] * a[i * r + c];
      s *= betas[j];
      for (std::size_t i = j; i < m; ++i) a[i * r + c] -= s * v[i - j];
    }
    diag[j] = -sign * alpha;
  }

  std::vector<double> q(m * r, 0.0);
  for (std::size_t j = 0; j < r; ++j) q[j * r + j] = 1.0;
  for (std::size_t jj = r; jj-- > 0;) {
    const std::vector<double>& v = reflectors[jj];
    if (betas[jj] == 0.0) continue;
    for (std::size_t c = 0; c < r; ++c) {
      double s = 0.0;
      for (std::size_t i = jj; i < m; ++i) s += v[i - jj] * q[i * r + c];
      s *= betas[jj];
      for (std::size_t i = jj; i < m; ++i) q[i * r + c] -= s * v[i - jj];
    }
  }
  for (std::size_t j = 0; j < r; ++j) {
    if (diag[j] < 0.0) {
      for (std::size_t i = 0; i < m; ++i) q[i * r + j] = -q[i * r + j];
    }
  }
  return Tensor(m, r, std::move(q));
}

Tensor decompress(const Tensor& p, const Tensor& q, double q_scale,
                  bool transposed) {
  if (p.cols() != q.cols()) {
    throw std::invalid_argument("decompress: factor ranks differ");
  }
  Tensor d = divided(matmul(p, q, false, true), q_scale);
  return transposed ? transpose(d) : d;
}

LowRankState::LowRankState(std::size_t rows, std::size_t cols,
                           const CompressionConfig& cfg)
    : cfg_(cfg), transposed_(orient(rows, cols)) {
  cfg_.validate();
  if (rows == 0 || cols == 0) throw std::invalid_argument("LowRankState: empty shard");
  m_ = transposed_ ? cols : rows;
  n_ = transposed_ ? rows : cols;
  if (cfg_.rank > m_) {
    throw std::invalid_argument("compression rank " + std::to_string(cfg_.rank) +
                                " exceeds min(m, n) = " + std::to_string(m_));
  }
  error_ = store(Tensor(m_, n_));
  p_ = Tensor(m_, cfg_.rank);
  q_ = store(Tensor(n_, cfg_.rank));
  multiplier_ = store(draw_gaussian(cfg_.q_seed));
}

Tensor LowRankState::store(const Tensor& t) const {
  return cfg_.low_precision ? t.with_format(lowp::m169()) : t.untagged();
}

Tensor LowRankState::oriented(const Tensor& t) const {
  return transposed_ ? transpose(t) : t.untagged();
}

Tensor LowRankState::draw_gaussian(std::uint64_t seed) const {
  Rng rng(seed);
  return Tensor::gaussian(n_, cfg_.rank, rng, 1.0 / std::sqrt(static_cast<double>(n_)));
}

Tensor LowRankState::error_buffer_original() const {
  return transposed_ ? transpose(error_) : error_.untagged();
}

void LowRankState::accumulate_error(const Tensor& reduced_grad, double grad_scale,
                                    bool reduce_finite) {
  if (!reduce_finite) return;
  const Tensor g = oriented(reduced_grad);
  if (!g.same_shape(error_)) {
    throw std::invalid_argument("accumulate_error: gradient shape mismatch");
  }
  error_ = store(add(error_, divided(g, grad_scale)));
}

Tensor LowRankState::compute_p_unscaled() const {
  return matmul(error_, multiplier_);
}

Tensor LowRankState::compute_p() const {
  return store(scaled(compute_p_unscaled(), cfg_.p_scale)).untagged();
}

void LowRankState::set_p(const Tensor& reduced_p) {
  if (reduced_p.rows() != m_ || reduced_p.cols() != cfg_.rank) {
    throw std::invalid_argument("set_p: shape mismatch");
  }
  p_ = householder_orthogonalize(reduced_p, cfg_.epsilon);
}

Tensor LowRankState::compute_q_unscaled() const {
  return matmul(error_, p_, true, false);
}

Tensor LowRankState::compute_q() const {
  return store(scaled(compute_q_unscaled(), cfg_.q_scale)).untagged();
}

void LowRankState::set_q(const Tensor& reduced_q) {
  if (reduced_q.rows() != n_ || reduced_q.cols() != cfg_.rank) {
    throw std::invalid_argument("set_q: shape mismatch");
  }
  q_ = store(reduced_q);
  ++rounds_;
  switch (cfg_.q_policy) {
    case QPolicy::kFixed:
      break;
    case QPolicy::kResample:
      multiplier_ = store(draw_gaussian(derive_seed({cfg_.q_seed, static_cast<std::uint64_t>(rounds_)})));
      break;
    case QPolicy::kWarmStart: {
      if (!all_finite(q_)) break;
      Tensor next = multiplier_.untagged();
      double* out = next.mutable_data();
      for (std::size_t c = 0; c < cfg_.rank; ++c) {
        double norm_sq = 0.0;
        for (std::size_t i = 0; i < n_; ++i) norm_sq += q_(i, c) * q_(i, c);
        if (norm_sq == 0.0) continue;
        const double norm = std::sqrt(norm_sq);
        for (std::size_t i = 0; i < n_; ++i) out[i * cfg_.rank + c] = q_(i, c) / norm;
      }
      multiplier_ = store(next);
      break;
    }
  }
}

Tensor LowRankState::decompressed() const {
  return decompress(p_, q_, cfg_.q_scale, transposed_);
}

void LowRankState::update_error(const Tensor& decompressed_over_machines,
                                bool pq_finite, bool step2_buffer_finite) {
  if (pq_finite) {
    const Tensor d = oriented(decompressed_over_machines);
    if (!d.same_shape(error_)) {
      throw std::invalid_argument("update_error: shape mismatch");
    }
    error_ = store(sub(error_, d));
    return;
  }
  if (step2_buffer_finite) return;
  error_ = store(Tensor(m_, n_));
}

void LowRankState::set_scales(double p_scale, double q_scale) {
  CompressionConfig next = cfg_;
  next.p_scale = p_scale;
  next.q_scale = q_scale;
  next.validate();
  cfg_ = next;
}

void LowRankState::set_error_buffer(const Tensor& e) {
  const Tensor o = oriented(e);
  if (!o.same_shape(error_)) throw std::invalid_argument("set_error_buffer: shape mismatch");
  error_ = store(o);
}

void LowRankState::set_multiplier(const Tensor& mult) {
  if (mult.rows() != n_ || mult.cols() != cfg_.rank) {
    throw std::invalid_argument("set_multiplier: shape mismatch");
  }
  multiplier_ = store(mult);
}

void LowRankState::set_rounds(std::int64_t rounds) { rounds_ = rounds; }

void compress(LowRankState& state) {
  state.set_p(state.compute_p());
  state.set_q(state.compute_q());
}

}  // namespace shardsim::powersgd
