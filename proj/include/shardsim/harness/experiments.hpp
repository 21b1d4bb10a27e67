// Copyright 2026 The shardsim Authors
// SPDX-License-Identifier: Apache-2.0

// Named experiment recipes. Each recipe has a typed entry point (used by
// the tests) and a report writer that emits CSV/JSON/PGM files into an
// output directory. Reports contain no timings, so identical configs give
// byte-identical files.

#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "shardsim/cluster.hpp"
#include "shardsim/harness/config.hpp"
#include "shardsim/shardplan.hpp"
#include "shardsim/toymodel/dvae.hpp"

namespace shardsim::harness {

struct Check {
  std::string name;
  bool passed = false;
  std::string detail;
};

struct Report {
  std::string experiment;
  std::vector<Check> checks;
  std::vector<std::string> files;
  bool all_passed() const;
};

const std::vector<std::string>& experiment_names();
// Throws std::invalid_argument for unknown names.
Report run_experiment(const std::string& name, const RunConfig& cfg,
                      const std::filesystem::path& out_dir);

// compression-table
struct CompressionRow {
  std::size_t d = 0, r = 0, m = 0;
  double rate = 0.0;
  std::optional<double> published;  // known reference value for this triple
};
std::vector<CompressionRow> compression_table(const RunConfig& cfg);

// bandwidth-report: one compressed and one uncompressed exchange of a
// single resblock's shard gradients.
struct BandwidthResult {
  shardplan::MeasuredRate measured;
  double analytic = 0.0;
  bool exact = false;
  cluster::CollectiveLedger ledger;
  std::size_t gathered_elements = 0;  // full parameters of one resblock
  std::size_t peak_live_elements = 0;  // current plus prefetched resblock
};
BandwidthResult bandwidth_exchange(std::size_t d, std::size_t m, std::size_t r,
                                   std::size_t machines, std::uint64_t seed);

// qpolicy-ab
struct PolicyResult {
  powersgd::QPolicy policy = powersgd::QPolicy::kFixed;
  std::vector<double> losses;  // one per seed
  double mean = 0.0;
};
std::vector<PolicyResult> qpolicy_ab(const RunConfig& cfg);

// underflow-demo
struct UnderflowArm {
  std::string name;
  bool per_resblock = false;
  bool outliers = true;
  std::vector<double> zero_fraction;  // per block, at the final scales
  std::vector<double> log2_scale;     // per block, final
  std::size_t last_block_zeros = 0;
  std::size_t last_block_elements = 0;
  std::size_t total_zeros = 0;
  std::size_t backoffs = 0;
};
struct UnderflowResult {
  std::vector<UnderflowArm> arms;  // global, per-resblock, global without outliers
};
UnderflowResult underflow_demo(const RunConfig& cfg);

// rank-gap
struct RankGapRow {
  std::size_t rank = 0;
  double final_train_loss = 0.0;
  double baseline_train_loss = 0.0;
  double relative_gap = 0.0;
};
std::vector<RankGapRow> rank_gap(const RunConfig& cfg);

// dvae-anneal
struct AnnealPoint {
  double tau = 0.0;
  toymodel::ElbEstimate elb;
};
struct DvaeAnnealResult {
  std::vector<AnnealPoint> final_model;  // trained model at tau = 1, 1/2, ..., 1/16
  std::vector<AnnealPoint> trajectory;   // checkpoints evaluated at their own tau
  double final_train_loss = 0.0;
};
DvaeAnnealResult dvae_anneal(const RunConfig& cfg);

// resume-check
struct ResumeResult {
  std::size_t steps_compared = 0;
  std::size_t elements_compared = 0;
  double max_ulp_deviation = 0.0;
  double max_abs_deviation = 0.0;
  std::vector<double> per_step_max_ulp;
};
ResumeResult resume_check(const RunConfig& cfg, const std::filesystem::path& scratch_dir);

}  // namespace shardsim::harness
