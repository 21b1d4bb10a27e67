// Copyright 2026 The shardsim Authors
// SPDX-License-Identifier: Apache-2.0

// Sharded, compressed data-parallel training over a simulated cluster.
//
// Each step runs, in order:
//   1. all-gather of parameter shards, forward/backward on every GPU
//   2. reduce-scatter averaging; shard gradients are unscaled and added to
//      the error buffers
//   3-5. P = E Q, grouped mean all-reduce (1-6-9, clamped), orthogonalize
//   6-7. Q = E^T P, grouped sum all-reduce
//   8. 32-bit all-reduce of uncompressed gradients
//   9-10. global norm from the Q norms and uncompressed norms, infinite if
//      anything is nonfinite
//   11. decompress, clip, AdamW (skipped when the norm is infinite)
//   12. error-buffer update by the nonfinite decision table
//   13. uncompressed parameter updates; per-resblock scalers step
//
// The per-GPU loss is the mean over its batch times 1/n_machines, so the
// cross-machine sum of error buffers approximates the mean gradient.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "shardsim/cluster.hpp"
#include "shardsim/gradscale.hpp"
#include "shardsim/harness/config.hpp"
#include "shardsim/harness/tasks.hpp"
#include "shardsim/optim.hpp"
#include "shardsim/powersgd.hpp"

namespace shardsim::harness {

struct StepRecord {
  std::int64_t step = 0;
  double loss = 0.0;  // mean per-GPU batch loss
  double global_norm = 0.0;
  bool skipped = false;
  std::size_t nonfinite_blocks = 0;
  double lr = 0.0;
};

struct LedgerTotals {
  // keyed by "<intra|inter>:<tag>"
  std::map<std::string, std::size_t> bytes;
  std::map<std::string, std::size_t> ops;
};

class Trainer {
 public:
  Trainer(RunConfig cfg, std::shared_ptr<const Task> task);

  void step();
  void run(std::int64_t steps);

  const RunConfig& config() const { return cfg_; }
  const Task& task() const { return *task_; }
  std::int64_t steps_done() const { return step_; }
  std::int64_t updates() const { return updates_; }
  std::size_t skipped_updates() const { return skipped_; }
  const std::vector<StepRecord>& history() const { return history_; }

  // Full parameters held by `machine` (assembled locally, no ledger entry).
  std::vector<Tensor> params(std::size_t machine = 0) const;
  std::vector<Tensor> ewia_params() const;
  double eval_loss(std::size_t machine = 0) const;

  // Gradient handed to the optimizer on the most recent step by machine 0,
  // [param][gpu] (before clipping). For compressed parameters this is the
  // decompressed gradient.
  const std::vector<std::vector<Tensor>>& last_update_grads() const { return last_grads_; }

  std::vector<double> scales() const;
  const std::vector<gradscale::ResblockScaler>& scalers() const { return scalers_; }
  double grad_divisor() const { return divisor_; }
  double p_scale() const { return p_scale_; }
  double q_scale() const { return q_scale_; }
  const powersgd::LowRankState& lowrank(std::size_t machine, std::size_t param,
                                        std::size_t gpu) const;
  bool is_sharded(std::size_t param) const { return sharded_[param]; }

  cluster::SimCluster& cluster() { return cluster_; }
  const cluster::SimCluster& cluster() const { return cluster_; }
  const LedgerTotals& ledger_totals() const { return totals_; }

  // Test hook: on `step`, GPU 0 of machine 0 gets an Inf in the incoming
  // gradient of `block`.
  void inject_nonfinite(std::int64_t step, int block);

  // Checkpoints hold machine-0 parameters, optimizer and EWIA state, scaler
  // states, and the cross-machine sum of every error buffer.
  std::string checkpoint_json() const;
  void save_checkpoint(const std::filesystem::path& path) const;
  // Restores a checkpoint; error buffers become sum / n_machines broadcast
  // to every machine. Throws on topology mismatch or malformed input.
  void load_checkpoint_json(const std::string& text);
  void load_checkpoint(const std::filesystem::path& path);

 private:
  using Grid = std::vector<std::vector<std::vector<Tensor>>>;  // [machine][param][gpu]

  std::size_t shard_count(std::size_t p) const { return sharded_[p] ? m_ : 1; }
  bool compressed(std::size_t p) const { return cfg_.compression && sharded_[p]; }
  void calibrate_divisor(const std::vector<Tensor>& full, const std::vector<double>& scales);
  bool calibrate_p();
  bool calibrate_q();
  void apply_factor_scales();
  void fold_ledger();

  RunConfig cfg_;
  std::shared_ptr<const Task> task_;
  cluster::SimCluster cluster_;
  std::vector<toymodel::ParamInfo> infos_;
  std::vector<bool> sharded_;
  std::size_t n_ = 1;  // machines
  std::size_t m_ = 1;  // GPUs per machine

  Grid params_;
  std::vector<std::vector<std::vector<optim::AdamWState>>> adam_;
  std::vector<std::vector<std::vector<powersgd::LowRankState>>> lowrank_;
  std::vector<std::vector<Tensor>> ewia_;
  std::vector<gradscale::ResblockScaler> scalers_;
  std::vector<std::vector<Tensor>> last_grads_;

  double divisor_ = 1.0;
  double p_scale_ = 1.0;
  double q_scale_ = 1.0;
  bool divisor_ready_ = false;
  bool p_ready_ = false;
  bool q_ready_ = false;

  std::int64_t step_ = 0;
  std::int64_t updates_ = 0;
  std::size_t skipped_ = 0;
  std::vector<StepRecord> history_;
  LedgerTotals totals_;
  std::size_t ledger_folded_ = 0;
  std::int64_t inject_step_ = -1;
  int inject_block_ = -1;
};

struct ReferenceResult {
  std::vector<double> losses;
  std::vector<Tensor> params;
};

// Plain single-replica loop: gradient, global-norm clipping, AdamW with
// full-precision moments. No sharding, scaling or compression.
ReferenceResult reference_train(const RunConfig& cfg, const Task& task);

}  // namespace shardsim::harness
