// Copyright 2026 The shardsim Authors
// SPDX-License-Identifier: Apache-2.0

#include "shardsim/cluster.hpp"

#include <cmath>
#include <stdexcept>

namespace shardsim::cluster {

void Topology::validate() const {
  if (n_machines < 1) throw std::invalid_argument("topology: n_machines must be >= 1");
  if (gpus_per_machine < 1) {
    throw std::invalid_argument("topology: gpus_per_machine must be >= 1");
  }
}

int payload_bits(const lowp::FloatFormatSpec* fmt) {
  if (fmt == nullptr) return 32;
  const int bits = fmt->total_bits();
  return bits <= 8 ? 8 : bits <= 16 ? 16 : 32;
}

void CollectiveLedger::record(std::string op_kind, Group group,
                              std::size_t element_count, int bits_per_element,
                              OpLabel label) {
  LedgerEntry e;
  e.op_kind = std::move(op_kind);
  e.group = group;
  e.element_count = element_count;
  e.bits_per_element = bits_per_element;
  e.logical_bytes = element_count * static_cast<std::size_t>(bits_per_element) / 8;
  e.label = std::move(label);
  entries_.push_back(std::move(e));
}

std::size_t CollectiveLedger::bytes(Group group, const std::string& tag) const {
  std::size_t total = 0;
  for (const auto& e : entries_) {
    if (e.group == group && e.label.tag == tag) total += e.logical_bytes;
  }
  return total;
}

std::size_t CollectiveLedger::count(Group group, const std::string& tag) const {
  std::size_t n = 0;
  for (const auto& e : entries_) {
    if (e.group == group && e.label.tag == tag) ++n;
  }
  return n;
}

SimCluster::SimCluster(Topology topology) : topology_(topology) {
  topology_.validate();
}

namespace {

void require_count(std::size_t got, std::size_t want, const char* op) {
  if (got != want) {
    throw std::invalid_argument(std::string(op) + ": expected " + std::to_string(want) +
                                " participants, got " + std::to_string(got));
  }
}

void require_same_shapes(std::span<const Tensor> values, const char* op) {
  for (const Tensor& t : values) {
    if (!t.same_shape(values.front())) {
      throw std::invalid_argument(std::string(op) + ": shape mismatch");
    }
  }
}

}  // namespace

std::vector<Tensor> SimCluster::all_gather(std::span<const Tensor> shards, int axis,
                                           int bits, OpLabel label) {
  require_count(shards.size(), topology_.gpus_per_machine, "all_gather");
  require_same_shapes(shards, "all_gather");
  const Tensor full = concat(shards, axis);
  ledger_.record("all_gather", Group::kIntra, full.size(), bits, std::move(label));
  return std::vector<Tensor>(shards.size(), full);
}

std::vector<Tensor> SimCluster::reduce_scatter_avg(std::span<const Tensor> full,
                                                   int axis,
                                                   const lowp::FloatFormatSpec* fmt,
                                                   OpLabel label) {
  const std::size_t m = topology_.gpus_per_machine;
  require_count(full.size(), m, "reduce_scatter_avg");
  require_same_shapes(full, "reduce_scatter_avg");
  const Tensor& first = full.front();
  const std::size_t extent = axis == 0 ? first.rows() : first.cols();
  if (extent % m != 0) {
    throw std::invalid_argument("reduce_scatter_avg: axis not divisible by GPU count");
  }
  Tensor sum = first.untagged();
  for (std::size_t g = 1; g < m; ++g) sum = add(sum, full[g]);
  Tensor mean = m == 1 ? sum : divided(sum, static_cast<double>(m));
  ledger_.record("reduce_scatter", Group::kIntra, first.size(), payload_bits(fmt),
                 std::move(label));
  const std::size_t width = extent / m;
  std::vector<Tensor> out;
  out.reserve(m);
  for (std::size_t g = 0; g < m; ++g) {
    Tensor s = slice(mean, axis, g * width, width);
    if (fmt) s = s.with_format(*fmt).untagged();
    out.push_back(std::move(s));
  }
  return out;
}

ReduceResult SimCluster::reduce_values(std::span<const Tensor> values, ReduceOp op,
                                       Group group, const lowp::FloatFormatSpec* fmt,
                                       bool clamp_infinities) const {
  const std::size_t want =
      group == Group::kInter ? topology_.n_machines : topology_.gpus_per_machine;
  require_count(values.size(), want, "all_reduce");
  require_same_shapes(values, "all_reduce");

  std::vector<Tensor> level(values.begin(), values.end());
  while (level.size() > 1) {
    std::vector<Tensor> next;
    next.reserve((level.size() + 1) / 2);
    for (std::size_t i = 0; i + 1 < level.size(); i += 2) {
      next.push_back(add(level[i], level[i + 1]));
    }
    if (level.size() % 2 == 1) next.push_back(level.back().untagged());
    level = std::move(next);
  }
  Tensor reduced = level.front().untagged();
  if (op == ReduceOp::kMean && values.size() > 1) {
    reduced = divided(reduced, static_cast<double>(values.size()));
  }
  if (fmt) reduced = reduced.with_format(*fmt).untagged();

  ReduceResult result;
  result.had_nonfinite = !all_finite(reduced);
  if (clamp_infinities && fmt) {
    const double hi = lowp::max_finite(*fmt);
    for (double& v : reduced.mutable_values()) {
      if (std::isinf(v)) v = v > 0 ? hi : -hi;
    }
  }
  result.value = std::move(reduced);
  return result;
}

ReduceResult SimCluster::all_reduce(std::span<const Tensor> values, ReduceOp op,
                                    Group group, const lowp::FloatFormatSpec* fmt,
                                    bool clamp_infinities, OpLabel label) {
  ReduceResult r = reduce_values(values, op, group, fmt, clamp_infinities);
  ledger_.record("all_reduce", group, values.front().size(), payload_bits(fmt),
                 std::move(label));
  return r;
}

ReduceResult SimCluster::all_reduce_mean(std::span<const Tensor> values,
                                         const lowp::FloatFormatSpec& fmt,
                                         bool clamp_infinities, OpLabel label) {
  return all_reduce(values, ReduceOp::kMean, Group::kInter, &fmt, clamp_infinities,
                    std::move(label));
}

std::vector<ReduceResult> SimCluster::grouped_all_reduce(
    const std::vector<std::vector<Tensor>>& buffers, ReduceOp op, Group group,
    const lowp::FloatFormatSpec* fmt, bool clamp_infinities, OpLabel label) {
  std::vector<ReduceResult> out;
  if (buffers.empty() || buffers.front().empty()) return out;
  const std::size_t n_buffers = buffers.front().size();
  for (const auto& b : buffers) {
    if (b.size() != n_buffers) {
      throw std::invalid_argument("grouped_all_reduce: ragged buffer lists");
    }
  }
  std::size_t elements = 0;
  std::vector<Tensor> column(buffers.size());
  for (std::size_t b = 0; b < n_buffers; ++b) {
    for (std::size_t p = 0; p < buffers.size(); ++p) column[p] = buffers[p][b];
    out.push_back(reduce_values(column, op, group, fmt, clamp_infinities));
    elements += column.front().size();
  }
  ledger_.record("grouped_all_reduce", group, elements, payload_bits(fmt),
                 std::move(label));
  return out;
}

std::vector<Tensor> SimCluster::broadcast(const Tensor& value, std::size_t from_machine,
                                          int bits, OpLabel label) {
  if (from_machine >= topology_.n_machines) {
    throw std::out_of_range("broadcast: invalid source machine");
  }
  ledger_.record("broadcast", Group::kInter, value.size(), bits, std::move(label));
  return std::vector<Tensor>(topology_.n_machines, value);
}

}  // namespace shardsim::cluster
