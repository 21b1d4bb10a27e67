// Copyright 2026 The shardsim Authors
// SPDX-License-Identifier: Apache-2.0

// Simulated machines x GPUs cluster with deterministic collectives.
//
// Collectives are synchronous: each call receives every participant's
// contribution at once and returns every participant's result. Reductions
// use a fixed order (ascending GPU index inside a machine, a pairwise tree
// over machine index across machines), so results never depend on how the
// callers were scheduled. Every collective appends one entry to the ledger
// with its logical payload size: element_count * bits / 8.

#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "shardsim/lowp.hpp"
#include "shardsim/tensor.hpp"

namespace shardsim::cluster {

struct Topology {
  std::size_t n_machines = 1;
  std::size_t gpus_per_machine = 1;
  std::uint64_t run_seed = 0;

  void validate() const;
  std::size_t world_size() const { return n_machines * gpus_per_machine; }
};

enum class Group { kIntra, kInter };
enum class ReduceOp { kMean, kSum };

// Descriptive labels attached to a ledger entry.
struct OpLabel {
  std::string tag = "other";  // "P", "Q", "G", "U", "flags", "params", ...
  int resblock = -1;
  int ordinal = -1;           // GPU ordinal within the machine, if relevant
  std::int64_t step = -1;
  bool overlappable = false;  // may overlap with compute in a real schedule
};

struct LedgerEntry {
  std::string op_kind;
  Group group = Group::kIntra;
  std::size_t element_count = 0;
  int bits_per_element = 32;
  std::size_t logical_bytes = 0;
  OpLabel label;
};

class CollectiveLedger {
 public:
  void record(std::string op_kind, Group group, std::size_t element_count,
              int bits_per_element, OpLabel label);
  const std::vector<LedgerEntry>& entries() const { return entries_; }
  void clear() { entries_.clear(); }
  // Sum of logical bytes over entries matching the group and tag.
  std::size_t bytes(Group group, const std::string& tag) const;
  std::size_t count(Group group, const std::string& tag) const;

 private:
  std::vector<LedgerEntry> entries_;
};

struct ReduceResult {
  Tensor value;
  bool had_nonfinite = false;  // before any clamping
};

class SimCluster {
 public:
  explicit SimCluster(Topology topology);

  const Topology& topology() const { return topology_; }
  CollectiveLedger& ledger() { return ledger_; }
  const CollectiveLedger& ledger() const { return ledger_; }

  // Intra-machine: concatenates one shard per GPU along `axis`; returns the
  // full tensor held by each GPU. `bits` describes the payload width.
  std::vector<Tensor> all_gather(std::span<const Tensor> shards, int axis,
                                 int bits = 32, OpLabel label = {});

  // Intra-machine: elementwise mean over GPUs (ascending index), then GPU k
  // receives slice k along `axis`. With `fmt` the slices are rounded to it.
  std::vector<Tensor> reduce_scatter_avg(std::span<const Tensor> full, int axis,
                                         const lowp::FloatFormatSpec* fmt = nullptr,
                                         OpLabel label = {});

  // Reduction of one value per participant over `group`. The reduced value
  // is rounded through `fmt` (if given) and infinities are clamped to
  // +-max_finite(fmt) when `clamp_infinities` is set.
  ReduceResult all_reduce(std::span<const Tensor> values, ReduceOp op,
                          Group group, const lowp::FloatFormatSpec* fmt,
                          bool clamp_infinities, OpLabel label = {});

  // Cross-machine mean (the common case).
  ReduceResult all_reduce_mean(std::span<const Tensor> values,
                               const lowp::FloatFormatSpec& fmt,
                               bool clamp_infinities, OpLabel label = {});

  // buffers[participant][b]: reduces every buffer b as all_reduce would,
  // recording a single ledger entry for the whole group.
  std::vector<ReduceResult> grouped_all_reduce(
      const std::vector<std::vector<Tensor>>& buffers, ReduceOp op, Group group,
      const lowp::FloatFormatSpec* fmt, bool clamp_infinities,
      OpLabel label = {});

  // Copies `value` from `from_machine` to every machine.
  std::vector<Tensor> broadcast(const Tensor& value, std::size_t from_machine,
                                int bits = 32, OpLabel label = {});

 private:
  ReduceResult reduce_values(std::span<const Tensor> values, ReduceOp op,
                             Group group, const lowp::FloatFormatSpec* fmt,
                             bool clamp_infinities) const;

  Topology topology_;
  CollectiveLedger ledger_;
};

// Payload width used in the ledger for tensors stored in `fmt` (32 when
// no format is given).
int payload_bits(const lowp::FloatFormatSpec* fmt);

}  // namespace shardsim::cluster
