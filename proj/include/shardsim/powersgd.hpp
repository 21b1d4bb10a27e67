// Copyright 2026 The shardsim Authors
// SPDX-License-Identifier: Apache-2.0

// Rank-r gradient compression with error feedback.
//
// For one parameter shard the state holds the error buffer E, the factors
// P (m x r) and Q (n x r), and the matrix Q is multiplied by to form P. The
// gradient is transposed when needed so that m <= n. One compression round
// proceeds as:
//
//   E += G / scale                        accumulate_error
//   P  = q(E Q_mult * p_scale)            compute_p      -> all-reduce (mean)
//   P  = householder(P + eps I)           set_p
//   Q  = q(E^T P * q_scale)               compute_q      -> all-reduce (sum)
//   D  = P Q^T / q_scale                  decompressed
//   E -= D / N_machines                   update_error
//
// where q() rounds through the storage format (1-6-9 when low precision is
// enabled).

#pragma once

#include <cstddef>
#include <cstdint>
#include <string_view>

#include "shardsim/tensor.hpp"

namespace shardsim::powersgd {

enum class QPolicy { kFixed, kWarmStart, kResample };

std::string_view q_policy_name(QPolicy policy);
// Accepts "fixed", "warm_start", "resample"; throws std::invalid_argument.
QPolicy parse_q_policy(std::string_view name);

struct CompressionConfig {
  std::size_t rank = 1;
  double epsilon = 1e-6;
  double p_scale = 1.0;
  double q_scale = 1.0;
  std::uint64_t q_seed = 0;
  QPolicy q_policy = QPolicy::kFixed;
  // Store E, the P payload and Q in 1-6-9; when false everything stays in double.
  // The orthogonalized P is always kept wide.
  bool low_precision = true;

  void validate() const;
};

// True when a (rows x cols) gradient must be transposed so that m <= n.
bool orient(std::size_t rows, std::size_t cols);

// Orthonormalizes the columns of P + epsilon * I with Householder
// reflections. Column signs are fixed so the triangular factor has a
// positive diagonal, which makes the result unique. Throws when rows < cols.
Tensor householder_orthogonalize(const Tensor& p, double epsilon);

// Wide-precision P Q^T / q_scale, transposed back when `transposed`.
Tensor decompress(const Tensor& p, const Tensor& q, double q_scale,
                  bool transposed);

class LowRankState {
 public:
  // rows x cols is the shard gradient shape before orientation.
  LowRankState(std::size_t rows, std::size_t cols, const CompressionConfig& cfg);

  bool transposed() const { return transposed_; }
  std::size_t m() const { return m_; }
  std::size_t n() const { return n_; }
  std::size_t rank() const { return cfg_.rank; }
  const CompressionConfig& config() const { return cfg_; }

  const Tensor& error_buffer() const { return error_; }
  const Tensor& p() const { return p_; }
  const Tensor& q() const { return q_; }
  const Tensor& multiplier() const { return multiplier_; }
  std::int64_t rounds() const { return rounds_; }

  // Error buffer in the original (unoriented) shape.
  Tensor error_buffer_original() const;

  // E += reduced_grad / grad_scale when reduce_finite; otherwise no change.
  // `reduced_grad` has the original shard shape.
  void accumulate_error(const Tensor& reduced_grad, double grad_scale,
                        bool reduce_finite);

  // P before averaging: q(E Q_mult * p_scale), m x r.
  Tensor compute_p() const;
  // P without scaling or rounding, used to calibrate p_scale.
  Tensor compute_p_unscaled() const;
  // Orthogonalizes the averaged P and stores it.
  void set_p(const Tensor& reduced_p);
  // Q before reduction: q(E^T P * q_scale), n x r.
  Tensor compute_q() const;
  Tensor compute_q_unscaled() const;
  // Stores the reduced Q and advances the multiplier per the Q policy.
  void set_q(const Tensor& reduced_q);

  // Current decompressed gradient in the original shard shape.
  Tensor decompressed() const;

  // Step-12 decision table. `decompressed_over_machines` is the decompressed
  // gradient (original shape) divided by the number of machines.
  void update_error(const Tensor& decompressed_over_machines, bool pq_finite,
                    bool step2_buffer_finite);

  void set_scales(double p_scale, double q_scale);
  // Replaces E (original shape); rounds through the storage format.
  void set_error_buffer(const Tensor& e);
  void set_multiplier(const Tensor& mult);
  void set_rounds(std::int64_t rounds);

 private:
  Tensor store(const Tensor& t) const;
  Tensor oriented(const Tensor& t) const;
  Tensor draw_gaussian(std::uint64_t seed) const;

  CompressionConfig cfg_;
  bool transposed_;
  std::size_t m_;
  std::size_t n_;
  Tensor error_;
  Tensor p_;
  Tensor q_;
  Tensor multiplier_;
  std::int64_t rounds_ = 0;
};

// Single-machine round: compute_p, set_p, compute_q, set_q.
void compress(LowRankState& state);

}  // namespace shardsim::powersgd
