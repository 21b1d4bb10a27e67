// Copyright 2026 The shardsim Authors
// SPDX-License-Identifier: Apache-2.0

// shardsim <subcommand> --config <file> --out <dir> [--seed N] [--check]

#include <exception>
#include <filesystem>
#include <iostream>
#include <string>

#include "CLI11.hpp"
#include "shardsim/harness/config.hpp"
#include "shardsim/harness/experiments.hpp"

int main(int argc, char** argv) {
  namespace h = shardsim::harness;
  CLI::App app{"Simulated sharded training with low-rank gradient compression"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;
  std::uint64_t seed = 0;
  bool check = false;

  for (const std::string& name : h::experiment_names()) {
    CLI::App* sub = app.add_subcommand(name, "run the " + name + " recipe");
    sub->add_option("--config", config_path, "run configuration (flat JSON)")
        ->required()
        ->check(CLI::ExistingFile);
    sub->add_option("--out", out_dir, "output directory")->required();
    sub->add_option("--seed", seed, "override the configured seed");
    sub->add_flag("--check", check, "exit nonzero when any check fails");
  }

  CLI11_PARSE(app, argc, argv);
  const std::string name = app.get_subcommands().front()->get_name();
  const bool seed_given = app.get_subcommands().front()->count("--seed") > 0;

  try {
    h::RunConfig cfg = h::load_config(config_path);
    if (seed_given) cfg.seed = seed;
    cfg.validate();
    const h::Report report = h::run_experiment(name, cfg, out_dir);
    for (const h::Check& c : report.checks) {
      std::cout << (c.passed ? "PASS " : "FAIL ") << c.name;
      if (!c.detail.empty()) std::cout << " (" << c.detail << ")";
      std::cout << '\n';
    }
    for (const std::string& f : report.files) {
      std::cout << "wrote " << (std::filesystem::path(out_dir) / f).string() << '\n';
    }
    if (check && !report.all_passed()) return 1;
  } catch (const std::exception& e) {
    std::cerr << "shardsim " << name << ": " << e.what() << '\n';
    return 2;
  }
  return 0;
}
