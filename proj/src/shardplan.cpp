// Copyright 2026 The shardsim Authors
// SPDX-License-Identifier: Apache-2.0

#include "shardsim/shardplan.hpp"

#include <stdexcept>

namespace shardsim::shardplan {

ShardSpec shard_matrix(std::string name, std::size_t rows, std::size_t cols,
                       int axis, std::size_t m, bool compressed) {
  if (m == 0) throw std::invalid_argument("shard_matrix: m must be >= 1");
  if (axis != 0 && axis != 1) throw std::invalid_argument("shard_matrix: axis must be 0 or 1");
  const std::size_t extent = axis == 0 ? rows : cols;
  if (extent % m != 0) {
    throw std::invalid_argument("shard_matrix: " + name + " axis " + std::to_string(axis) +
                                " extent " + std::to_string(extent) +
                                " not divisible by " + std::to_string(m));
  }
  ShardSpec s;
  s.param_name = std::move(name);
  s.full_rows = rows;
  s.full_cols = cols;
  s.shard_axis = axis;
  s.shard_rows = axis == 0 ? rows / m : rows;
  s.shard_cols = axis == 1 ? cols / m : cols;
  s.compressed = compressed;
  return s;
}

std::vector<ShardSpec> plan_resblock(std::size_t d, std::size_t m) {
  if (d == 0) throw std::invalid_argument("plan_resblock: d must be >= 1");
  return {
      shard_matrix("attn_q", d, d, 1, m),
      shard_matrix("attn_k", d, d, 1, m),
      shard_matrix("attn_v", d, d, 1, m),
      shard_matrix("attn_post", d, d, 1, m),
      shard_matrix("mlp_fc1", d, 4 * d, 1, m),
      shard_matrix("mlp_fc2", 4 * d, d, 0, m),
  };
}

FactorShapes factor_shapes(const ShardSpec& spec, std::size_t r, std::size_t m) {
  if (m == 0 || r % m != 0) {
    throw std::invalid_argument("factor_shapes: rank must be divisible by m");
  }
  const std::size_t per_gpu = r / m;
  return FactorShapes{spec.shard_rows, per_gpu, per_gpu, spec.shard_cols};
}

std::size_t total_shard_elements(const std::vector<ShardSpec>& plan) {
  std::size_t n = 0;
  for (const auto& s : plan) n += s.shard_elements();
  return n;
}

std::size_t total_factor_elements(const std::vector<ShardSpec>& plan,
                                  std::size_t r, std::size_t m) {
  std::size_t n = 0;
  for (const auto& s : plan) {
    const FactorShapes f = factor_shapes(s, r, m);
    n += f.p_elements() + f.q_elements();
  }
  return n;
}

double compression_rate(std::size_t d, std::size_t r, std::size_t m) {
  if (d == 0 || m == 0) throw std::invalid_argument("compression_rate: d and m must be >= 1");
  const double num = static_cast<double>(r) * static_cast<double>(m + 2);
  const double den = 2.0 * static_cast<double>(d) * static_cast<double>(m);
  return 1.0 - num / den;
}

MeasuredRate measured_rate(const cluster::CollectiveLedger& ledger) {
  using cluster::Group;
  if (ledger.count(Group::kInter, "P") == 0 || ledger.count(Group::kInter, "Q") == 0 ||
      ledger.count(Group::kInter, "G") == 0) {
    throw std::invalid_argument("measured_rate: ledger lacks P, Q or G exchanges");
  }
  MeasuredRate m;
  m.p_bytes = ledger.bytes(Group::kInter, "P");
  m.q_bytes = ledger.bytes(Group::kInter, "Q");
  m.g_bytes = ledger.bytes(Group::kInter, "G");
  if (m.g_bytes == 0) throw std::invalid_argument("measured_rate: empty G exchange");
  m.rate = 1.0 - static_cast<double>(m.p_bytes + m.q_bytes) / static_cast<double>(m.g_bytes);
  return m;
}

bool rate_matches_exactly(const MeasuredRate& measured, std::size_t d,
                          std::size_t r, std::size_t m) {
  // (P + Q) / G == r(m+2) / (2dm)
  const unsigned __int128 lhs =
      static_cast<unsigned __int128>(measured.p_bytes + measured.q_bytes) * (2 * d * m);
  const unsigned __int128 rhs = static_cast<unsigned __int128>(measured.g_bytes) * (r * (m + 2));
  return lhs == rhs;
}

}  // namespace shardsim::shardplan
