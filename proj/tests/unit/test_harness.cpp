// Copyright 2026 The shardsim Authors
// SPDX-License-Identifier: Apache-2.0

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "doctest.h"
#include "shardsim/harness/config.hpp"
#include "shardsim/harness/experiments.hpp"
#include "shardsim/harness/tasks.hpp"
#include "shardsim/harness/trainer.hpp"

using namespace shardsim;
using namespace shardsim::harness;
namespace fs = std::filesystem;

namespace {

RunConfig linreg(std::size_t machines, std::size_t gpus) {
  RunConfig c;
  c.topology = {machines, gpus, 1};
  c.steps = 60;
  c.linreg.outputs = 8;
  return c;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::ostringstream s;
  s << in.rdbuf();
  return s.str();
}

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("shardsim_harness_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

bool same_params(const std::vector<Tensor>& a, const std::vector<Tensor>& b) {
  if (a.size() != b.size()) return false;
  for (std::size_t i = 0; i < a.size(); ++i) {
    if (!(a[i] == b[i])) return false;
  }
  return true;
}

}  // namespace

TEST_CASE("config parsing") {
  const RunConfig c = parse_config(R"({"task": "transformer", "machines": 3, "gpus_per_machine": 2,
                                       "rank": 4, "q_policy": "resample", "lr": 0.001})");
  CHECK(c.task == TaskKind::kTransformer);
  CHECK(c.topology.n_machines == 3);
  CHECK(c.topology.gpus_per_machine == 2);
  CHECK(c.q_policy == powersgd::QPolicy::kResample);
  CHECK(c.lr == 0.001);
  CHECK(c.steps == RunConfig{}.steps);
  CHECK_THROWS_AS(parse_config(R"({"bogus": 1})"), std::invalid_argument);
  CHECK_THROWS_AS(parse_config(R"({"steps": "many"})"), std::invalid_argument);
  CHECK_THROWS_AS(parse_config(R"({"rank": 3, "gpus_per_machine": 2})"), std::invalid_argument);
  CHECK_THROWS_AS(parse_config(R"({"p_scale": 3.0})"), std::invalid_argument);
  CHECK_THROWS_AS(parse_config(R"({"machines": 0})"), std::invalid_argument);
  CHECK_THROWS_AS(parse_config("[1, 2]"), std::invalid_argument);
  CHECK_THROWS_AS(parse_config("{not json"), std::invalid_argument);
  CHECK_THROWS(load_config("/nonexistent/config.json"));
  for (const auto& entry : fs::directory_iterator(SHARDSIM_CONFIG_DIR)) {
    CAPTURE(entry.path().string());
    CHECK_NOTHROW(load_config(entry.path()));
  }
}

TEST_CASE("degenerate configuration reproduces the reference loop") {
  RunConfig c = linreg(1, 1);
  c.compression = false;
  c.mixed_precision = false;
  c.low_precision_moments = false;
  const auto task = make_task(c);
  Trainer t(c, task);
  t.run(c.steps);
  const auto ref = reference_train(c, *task);
  REQUIRE(ref.losses.size() == t.history().size());
  for (std::size_t i = 0; i < ref.losses.size(); ++i) CHECK(ref.losses[i] == t.history()[i].loss);
  CHECK(same_params(ref.params, t.params()));
}

TEST_CASE("machines with identical data stay identical") {
  RunConfig c = linreg(3, 2);
  c.compression = false;
  c.identical_machine_data = true;
  c.mixed_precision = true;
  Trainer t(c, make_task(c));
  for (int s = 0; s < 20; ++s) {
    t.step();
    CHECK(same_params(t.params(0), t.params(1)));
    CHECK(same_params(t.params(0), t.params(2)));
  }
}

TEST_CASE("threaded execution matches single-threaded") {
  RunConfig c = linreg(2, 2);
  c.mixed_precision = true;
  c.steps = 15;
  Trainer a(c, make_task(c));
  a.run(c.steps);
  c.threads = 3;
  Trainer b(c, make_task(c));
  b.run(c.steps);
  CHECK(same_params(a.params(), b.params()));
  CHECK(a.checkpoint_json() == b.checkpoint_json());
}

TEST_CASE("compressed linear regression tracks the uncompressed baseline") {
  RunConfig c;
  c.topology = {2, 1, 1};
  c.steps = 500;
  c.rank = 2;
  Trainer comp(c, make_task(c));
  comp.run(c.steps);
  c.compression = false;
  Trainer base(c, make_task(c));
  base.run(c.steps);
  CHECK(comp.eval_loss() <= 1.10 * base.eval_loss());
}

TEST_CASE("checkpoint round trip") {
  RunConfig c = linreg(1, 2);
  c.mixed_precision = true;
  const auto task = make_task(c);
  Trainer fresh(c, task);
  Trainer other(c, task);
  other.load_checkpoint_json(fresh.checkpoint_json());
  CHECK(other.checkpoint_json() == fresh.checkpoint_json());

  Trainer full(c, task);
  full.run(25);
  Trainer first(c, task);
  first.run(15);
  const fs::path dir = scratch("ckpt");
  first.save_checkpoint(dir / "ckpt.json");
  Trainer resumed(c, task);
  resumed.load_checkpoint(dir / "ckpt.json");
  CHECK(resumed.steps_done() == 15);
  resumed.run(10);
  CHECK(same_params(full.params(), resumed.params()));
  for (std::size_t i = 0; i < 10; ++i) CHECK(full.history()[15 + i].loss == resumed.history()[i].loss);

  RunConfig wider = c;
  wider.topology.n_machines = 2;
  Trainer mismatch(wider, make_task(wider));
  CHECK_THROWS_AS(mismatch.load_checkpoint_json(first.checkpoint_json()), std::invalid_argument);
  CHECK_THROWS_AS(other.load_checkpoint_json("{\"step\": 1}"), std::invalid_argument);
  CHECK_THROWS(other.load_checkpoint(dir / "missing.json"));
}

TEST_CASE("checkpoints store summed error buffers") {
  RunConfig c = linreg(2, 1);
  const auto task = make_task(c);
  Trainer t(c, task);
  t.run(10);
  Trainer r(c, task);
  r.load_checkpoint_json(t.checkpoint_json());
  for (std::size_t p = 0; p < task->param_infos().size(); ++p) {
    if (!t.is_sharded(p)) continue;
    const Tensor sum = add(t.lowrank(0, p, 0).error_buffer(), t.lowrank(1, p, 0).error_buffer());
    const Tensor restored = r.lowrank(0, p, 0).error_buffer();
    CHECK(r.lowrank(1, p, 0).error_buffer() == restored);
    for (std::size_t e = 0; e < sum.size(); ++e) {
      CHECK(lowp::ulp_distance(restored[e], lowp::quantize(sum[e] / 2, lowp::m169()), lowp::m169()) <= 1.0);
    }
  }
}

TEST_CASE("nonfinite branch gradient backs off the scale without skipping") {
  RunConfig c = linreg(2, 2);
  c.mixed_precision = true;
  Trainer t(c, make_task(c));
  t.run(5);
  const double scale = t.scales()[0];
  t.inject_nonfinite(5, 0);
  t.step();
  CHECK(t.history().back().nonfinite_blocks == 1);
  CHECK_FALSE(t.history().back().skipped);
  CHECK(t.scales()[0] < scale);
  for (const auto& p : t.params()) CHECK(all_finite(p));
}

TEST_CASE("nonfinite factors skip the update and are accounted") {
  RunConfig c = linreg(2, 2);
  c.mixed_precision = true;
  c.p_scale = 0x1p40;  // every P overflows 1-6-9
  Trainer t(c, make_task(c));
  const auto before = t.params();
  const auto ewia_before = t.ewia_params();
  t.run(6);
  std::size_t infinite = 0;
  for (const auto& h : t.history()) {
    infinite += std::isinf(h.global_norm) ? 1 : 0;
    CHECK(h.skipped == std::isinf(h.global_norm));
  }
  CHECK(infinite == 6);
  CHECK(t.skipped_updates() == infinite);
  CHECK(t.updates() == 0);
  CHECK(same_params(before, t.params()));
  CHECK(same_params(ewia_before, t.ewia_params()));

  RunConfig ok = linreg(2, 2);
  ok.mixed_precision = true;
  Trainer u(ok, make_task(ok));
  u.run(30);
  std::size_t inf2 = 0;
  for (const auto& h : u.history()) inf2 += std::isinf(h.global_norm) ? 1 : 0;
  CHECK(u.skipped_updates() == inf2);
  CHECK(u.updates() + static_cast<std::int64_t>(u.skipped_updates()) == u.steps_done());
}

TEST_CASE("experiment reports are deterministic") {
  CHECK_THROWS_AS(run_experiment("no-such-recipe", RunConfig{}, scratch("bad")), std::invalid_argument);
  for (const std::string name : {"compression-table", "bandwidth-report", "mask-dump", "format-inspect", "train"}) {
    CAPTURE(name);
    RunConfig c = linreg(2, 2);
    c.steps = 20;
    c.mixed_precision = true;
    const fs::path a = scratch("det_a"), b = scratch("det_b");
    const Report ra = run_experiment(name, c, a);
    const Report rb = run_experiment(name, c, b);
    REQUIRE(ra.files == rb.files);
    CHECK_FALSE(ra.files.empty());
    for (const auto& f : ra.files) CHECK(slurp(a / f) == slurp(b / f));
  }
}

TEST_CASE("compression table rows") {
  RunConfig c;
  const auto rows = compression_table(c);
  REQUIRE(rows.size() == 3);
  for (const auto& r : rows) {
    REQUIRE(r.published.has_value());
    CHECK(std::fabs(r.rate - *r.published) < 5e-5);
  }
}
