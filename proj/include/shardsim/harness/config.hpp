// Copyright 2026 The shardsim Authors
// SPDX-License-Identifier: Apache-2.0

// Run configuration. Files are flat JSON objects: every key maps to a
// number, string, boolean or an array of numbers. Unknown keys are errors.
// See docs/config.md for the full key list.

#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "shardsim/cluster.hpp"
#include "shardsim/optim.hpp"
#include "shardsim/powersgd.hpp"
#include "shardsim/toymodel/transformer.hpp"

namespace shardsim::harness {

enum class TaskKind { kLinreg, kTransformer };

struct LinregConfig {
  std::size_t features = 32;
  std::size_t outputs = 16;
  double noise = 0.1;
  std::size_t eval_samples = 256;
};

struct RunConfig {
  std::string experiment = "train";
  TaskKind task = TaskKind::kLinreg;
  std::uint64_t seed = 1;
  std::int64_t steps = 500;
  std::size_t batch_per_gpu = 8;
  cluster::Topology topology{2, 1, 1};
  std::size_t threads = 1;
  bool identical_machine_data = false;
  bool record_ledger = false;

  // Gradient compression. `rank` is the per-machine total; each GPU uses
  // rank / gpus_per_machine for its shards.
  bool compression = true;
  std::size_t rank = 2;
  powersgd::QPolicy q_policy = powersgd::QPolicy::kFixed;
  bool factor_low_precision = true;
  double epsilon = 1e-6;
  std::optional<double> p_scale;  // calibrated at step 0 when unset
  std::optional<double> q_scale;

  bool mixed_precision = false;
  bool low_precision_moments = true;
  std::optional<double> grad_divisor;  // calibrated at step 0 when unset

  optim::HyperParams hyper = linreg_hyper();
  std::string lr_schedule = "cosine";  // cosine | constant | warmup_cosine
  double lr = 3e-2;
  double lr_end = 1e-4;
  std::int64_t warmup_steps = 0;

  LinregConfig linreg;
  toymodel::TransformerConfig transformer;

  // Experiment parameters.
  std::vector<std::array<std::size_t, 3>> table_triples{{1920, 512, 8}, {2688, 640, 8},
                                                        {3968, 896, 8}};
  std::vector<std::uint64_t> qpolicy_seeds{1, 2, 3, 4, 5};
  std::vector<std::size_t> rank_gap_ranks{1, 2, 4, 8, 16};
  std::size_t underflow_blocks = 24;
  double underflow_decay = 0.5;
  std::int64_t underflow_steps = 12000;
  std::int64_t dvae_steps = 3000;
  std::size_t dvae_batch = 32;
  std::int64_t resume_save_step = 20;
  std::int64_t resume_extra_steps = 10;
  std::size_t mask_layers = 64;
  std::vector<std::string> format_names{"fp16", "m169", "u0610"};
  std::size_t bandwidth_d = 64;
  std::size_t bandwidth_m = 8;
  std::size_t bandwidth_r = 8;
  std::size_t bandwidth_machines = 2;

  static optim::HyperParams linreg_hyper();

  // Throws std::invalid_argument on inconsistent dimensions.
  void validate() const;
  std::size_t rank_per_gpu() const { return rank / topology.gpus_per_machine; }
  // Step size after `updates` applied updates.
  double lr_at(std::int64_t updates) const;
};

// Parses a flat JSON document. Keys absent from the document keep their
// defaults. Throws std::invalid_argument with the offending key.
RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);
std::string task_name(TaskKind kind);

}  // namespace shardsim::harness
