// Copyright 2026 The shardsim Authors
// SPDX-License-Identifier: Apache-2.0

// Shard layout of one transformer resblock pair and the closed-form
// bandwidth model for compressed gradient exchange.
//
// Every matrix is split across the m GPUs of a machine along axis 1, except
// the second MLP matrix which is split along axis 0. With total rank r
// split evenly (r/m per GPU), the P and Q factors of one GPU's six shards
// sum to 6r(m+2)d/m^2 elements, against 12d^2/m uncompressed elements, giving a
// compression rate of 1 - r(m+2)/(2dm).

#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "shardsim/cluster.hpp"

namespace shardsim::shardplan {

struct ShardSpec {
  std::string param_name;
  std::size_t full_rows = 0;
  std::size_t full_cols = 0;
  int shard_axis = 1;
  std::size_t shard_rows = 0;
  std::size_t shard_cols = 0;
  bool compressed = true;

  std::size_t shard_elements() const { return shard_rows * shard_cols; }
};

// Shards a rows x cols matrix across m GPUs along `axis`.
ShardSpec shard_matrix(std::string name, std::size_t rows, std::size_t cols,
                       int axis, std::size_t m, bool compressed = true);

// attn_q, attn_k, attn_v, attn_post, mlp_fc1, mlp_fc2.
std::vector<ShardSpec> plan_resblock(std::size_t d, std::size_t m);

struct FactorShapes {
  std::size_t p_rows = 0, p_cols = 0;  // P
  std::size_t q_rows = 0, q_cols = 0;  // Q^t
  std::size_t p_elements() const { return p_rows * p_cols; }
  std::size_t q_elements() const { return q_rows * q_cols; }
};

// Factor shapes for a shard with per-GPU rank r/m. P has the shard's row
// count, Q^t its column count. Throws when r is not divisible by m.
FactorShapes factor_shapes(const ShardSpec& spec, std::size_t r, std::size_t m);

std::size_t total_shard_elements(const std::vector<ShardSpec>& plan);
std::size_t total_factor_elements(const std::vector<ShardSpec>& plan,
                                  std::size_t r, std::size_t m);

// 1 - r(m+2)/(2dm)
double compression_rate(std::size_t d, std::size_t r, std::size_t m);

struct MeasuredRate {
  std::size_t p_bytes = 0;
  std::size_t q_bytes = 0;
  std::size_t g_bytes = 0;
  double rate = 0.0;
};

// 1 - (P bytes + Q bytes) / (G bytes) over inter-machine ledger entries
// tagged "P", "Q" and "G". Throws std::invalid_argument when any of the
// three is missing.
MeasuredRate measured_rate(const cluster::CollectiveLedger& ledger);

// Exact comparison of a measured rate against the closed form using
// integer cross-multiplication.
bool rate_matches_exactly(const MeasuredRate& measured, std::size_t d,
                          std::size_t r, std::size_t m);

}  // namespace shardsim::shardplan
