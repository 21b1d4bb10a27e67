// Copyright 2026 The shardsim Authors
// SPDX-License-Identifier: Apache-2.0

#include "shardsim/harness/experiments.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <limits>
#include <map>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "shardsim/gradscale.hpp"
#include "shardsim/lowp.hpp"
#include "shardsim/optim.hpp"
#include "shardsim/powersgd.hpp"
#include "shardsim/rng.hpp"
#include "shardsim/toymodel/masks.hpp"
#include "shardsim/harness/trainer.hpp"

namespace shardsim::harness {
namespace {

using nlohmann::json;
namespace fs = std::filesystem;

std::string fmt_double(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

class Writer {
 public:
  Writer(const fs::path& dir, Report& report) : dir_(dir), report_(report) {
    fs::create_directories(dir_);
  }
  void text(const std::string& name, const std::string& content) {
    std::ofstream out(dir_ / name, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + (dir_ / name).string());
    out << content;
    report_.files.push_back(name);
  }
  void json_file(const std::string& name, const json& doc) { text(name, doc.dump(2) + "\n"); }

 private:
  fs::path dir_;
  Report& report_;
};

void check(Report& r, std::string name, bool passed, std::string detail) {
  r.checks.push_back({std::move(name), passed, std::move(detail)});
}

json checks_json(const Report& r) {
  json a = json::array();
  for (const Check& c : r.checks) {
    a.push_back({{"name", c.name}, {"passed", c.passed}, {"detail", c.detail}});
  }
  return a;
}

// Reference values for the three published (d, r, m) configurations.
std::optional<double> published_rate(std::size_t d, std::size_t r, std::size_t m) {
  if (m != 8) return std::nullopt;
  if (d == 1920 && r == 512) return 0.8333;
  if (d == 2688 && r == 640) return 0.8512;
  if (d == 3968 && r == 896) return 0.8589;
  return std::nullopt;
}

std::string group_name(cluster::Group g) { return g == cluster::Group::kInter ? "inter" : "intra"; }

json ledger_json(const cluster::CollectiveLedger& ledger) {
  json a = json::array();
  for (const auto& e : ledger.entries()) {
    a.push_back({{"op", e.op_kind},
                 {"group", group_name(e.group)},
                 {"elements", e.element_count},
                 {"bits", e.bits_per_element},
                 {"bytes", e.logical_bytes},
                 {"tag", e.label.tag},
                 {"resblock", e.label.resblock},
                 {"ordinal", e.label.ordinal},
                 {"step", e.label.step},
                 {"overlappable", e.label.overlappable}});
  }
  return a;
}

// ---------------------------------------------------------------- reports

Report report_compression_table(const RunConfig& cfg, const fs::path& out) {
  Report r{"compression-table", {}, {}};
  Writer w(out, r);
  std::ostringstream csv;
  csv << "d,r,m,rate,published\n";
  for (const CompressionRow& row : compression_table(cfg)) {
    csv << row.d << ',' << row.r << ',' << row.m << ',' << fmt_double(row.rate) << ','
        << (row.published ? fmt_double(*row.published) : "") << '\n';
    if (row.published) {
      const double diff = std::fabs(row.rate - *row.published);
      check(r, "rate d=" + std::to_string(row.d) + " r=" + std::to_string(row.r), diff <= 0.005,
            "rate " + fmt_double(row.rate) + " vs " + fmt_double(*row.published));
    }
  }
  w.text("compression_table.csv", csv.str());
  return r;
}

Report report_bandwidth(const RunConfig& cfg, const fs::path& out) {
  Report r{"bandwidth-report", {}, {}};
  Writer w(out, r);
  const BandwidthResult b = bandwidth_exchange(cfg.bandwidth_d, cfg.bandwidth_m, cfg.bandwidth_r,
                                               cfg.bandwidth_machines, cfg.seed);
  json doc;
  doc["d"] = cfg.bandwidth_d;
  doc["m"] = cfg.bandwidth_m;
  doc["r"] = cfg.bandwidth_r;
  doc["machines"] = cfg.bandwidth_machines;
  doc["p_bytes"] = b.measured.p_bytes;
  doc["q_bytes"] = b.measured.q_bytes;
  doc["g_bytes"] = b.measured.g_bytes;
  doc["measured_rate"] = b.measured.rate;
  doc["analytic_rate"] = b.analytic;
  doc["exact_match"] = b.exact;
  doc["gathered_elements_per_resblock"] = b.gathered_elements;
  doc["peak_live_elements_with_prefetch"] = b.peak_live_elements;
  doc["ledger"] = ledger_json(b.ledger);
  check(r, "measured rate equals r(m+2)/(2dm)", b.exact,
        fmt_double(b.measured.rate) + " vs " + fmt_double(b.analytic));
  doc["checks"] = checks_json(r);
  w.json_file("bandwidth_ledger.json", doc);

  std::map<std::tuple<int, std::string, std::string>, std::pair<std::size_t, std::size_t>> agg;
  for (const auto& e : b.ledger.entries()) {
    auto& slot = agg[{e.label.resblock, e.label.tag, group_name(e.group)}];
    slot.first += e.element_count;
    slot.second += e.logical_bytes;
  }
  std::ostringstream csv;
  csv << "resblock,tag,group,elements,bytes\n";
  for (const auto& [key, v] : agg) {
    csv << std::get<0>(key) << ',' << std::get<1>(key) << ',' << std::get<2>(key) << ','
        << v.first << ',' << v.second << '\n';
  }
  w.text("bandwidth_summary.csv", csv.str());
  return r;
}

Report report_qpolicy(const RunConfig& cfg, const fs::path& out) {
  Report r{"qpolicy-ab", {}, {}};
  Writer w(out, r);
  const auto results = qpolicy_ab(cfg);
  std::ostringstream csv;
  csv << "policy,seed,final_loss\n";
  json doc;
  double fixed = 0, warm = 0, resample = 0;
  for (const PolicyResult& p : results) {
    const std::string name(powersgd::q_policy_name(p.policy));
    for (std::size_t s = 0; s < p.losses.size(); ++s) {
      csv << name << ',' << cfg.qpolicy_seeds[s] << ',' << fmt_double(p.losses[s]) << '\n';
    }
    doc["mean_final_loss"][name] = p.mean;
    if (p.policy == powersgd::QPolicy::kFixed) fixed = p.mean;
    if (p.policy == powersgd::QPolicy::kWarmStart) warm = p.mean;
    if (p.policy == powersgd::QPolicy::kResample) resample = p.mean;
  }
  check(r, "fixed <= 1.05 x warm_start", fixed <= 1.05 * warm,
        "fixed " + fmt_double(fixed) + ", warm_start " + fmt_double(warm));
  check(r, "resample >= 1.5 x fixed", resample >= 1.5 * fixed,
        "resample " + fmt_double(resample) + ", fixed " + fmt_double(fixed));
  doc["checks"] = checks_json(r);
  w.text("qpolicy_ab.csv", csv.str());
  w.json_file("qpolicy_ab.json", doc);
  return r;
}

Report report_underflow(const RunConfig& cfg, const fs::path& out) {
  Report r{"underflow-demo", {}, {}};
  Writer w(out, r);
  const UnderflowResult u = underflow_demo(cfg);
  std::ostringstream csv;
  csv << "arm,block,zero_fraction,log2_scale\n";
  json doc;
  for (const UnderflowArm& a : u.arms) {
    for (std::size_t b = 0; b < a.zero_fraction.size(); ++b) {
      csv << a.name << ',' << b << ',' << fmt_double(a.zero_fraction[b]) << ','
          << fmt_double(a.log2_scale[b]) << '\n';
    }
    doc[a.name] = {{"last_block_zeros", a.last_block_zeros},
                   {"last_block_elements", a.last_block_elements},
                   {"total_zeros", a.total_zeros},
                   {"backoffs", a.backoffs}};
  }
  const UnderflowArm& global = u.arms[0];
  const UnderflowArm& per = u.arms[1];
  const double frac = static_cast<double>(global.last_block_zeros) /
                      static_cast<double>(std::max<std::size_t>(1, global.last_block_elements));
  check(r, "global scaling zeroes > 50% of last-block gradients", frac > 0.5,
        "zeroed fraction " + fmt_double(frac));
  check(r, "per-resblock scaling zeroes none", per.total_zeros == 0,
        std::to_string(per.total_zeros) + " zeroed elements");
  doc["checks"] = checks_json(r);
  w.text("underflow.csv", csv.str());
  w.json_file("underflow.json", doc);
  return r;
}

Report report_rank_gap(const RunConfig& cfg, const fs::path& out) {
  Report r{"rank-gap", {}, {}};
  Writer w(out, r);
  std::ostringstream csv;
  csv << "rank,final_train_loss,baseline_train_loss,relative_gap\n";
  for (const RankGapRow& row : rank_gap(cfg)) {
    csv << row.rank << ',' << fmt_double(row.final_train_loss) << ','
        << fmt_double(row.baseline_train_loss) << ',' << fmt_double(row.relative_gap) << '\n';
  }
  w.text("rank_gap.csv", csv.str());
  return r;
}

Report report_dvae(const RunConfig& cfg, const fs::path& out) {
  Report r{"dvae-anneal", {}, {}};
  Writer w(out, r);
  const DvaeAnnealResult d = dvae_anneal(cfg);
  std::ostringstream csv;
  csv << "series,tau,relaxed,true,gap\n";
  for (const AnnealPoint& p : d.final_model) {
    csv << "final_model," << fmt_double(p.tau) << ',' << fmt_double(p.elb.relaxed) << ','
        << fmt_double(p.elb.hard) << ',' << fmt_double(p.elb.gap()) << '\n';
  }
  for (const AnnealPoint& p : d.trajectory) {
    csv << "checkpoint," << fmt_double(p.tau) << ',' << fmt_double(p.elb.relaxed) << ','
        << fmt_double(p.elb.hard) << ',' << fmt_double(p.elb.gap()) << '\n';
  }
  const double gap_hi = d.final_model.front().elb.gap();
  const double gap_lo = d.final_model.back().elb.gap();
  check(r, "gap at tau=1/16 smaller than at tau=1", gap_lo < gap_hi,
        fmt_double(gap_lo) + " vs " + fmt_double(gap_hi));
  json doc;
  doc["final_train_loss"] = d.final_train_loss;
  doc["checks"] = checks_json(r);
  w.text("dvae_anneal.csv", csv.str());
  w.json_file("dvae_anneal.json", doc);
  return r;
}

Report report_resume(const RunConfig& cfg, const fs::path& out) {
  Report r{"resume-check", {}, {}};
  Writer w(out, r);
  const ResumeResult res = resume_check(cfg, out);
  r.files.push_back("resume_checkpoint.json");
  check(r, "post-resume decompressed gradients within 1 ulp(1-6-9)",
        res.max_ulp_deviation <= 1.0, "max deviation " + fmt_double(res.max_ulp_deviation) + " ulp");
  json doc;
  doc["steps_compared"] = res.steps_compared;
  doc["elements_compared"] = res.elements_compared;
  doc["max_ulp_deviation"] = res.max_ulp_deviation;
  doc["max_abs_deviation"] = res.max_abs_deviation;
  doc["per_step_max_ulp"] = res.per_step_max_ulp;
  doc["factor_low_precision"] = cfg.factor_low_precision;
  if (cfg.factor_low_precision) {
    // Same protocol with wide error buffers and factors, reported alongside.
    RunConfig wide = cfg;
    wide.factor_low_precision = false;
    const ResumeResult control = resume_check(wide, out / "wide_control");
    doc["wide_control_max_ulp_deviation"] = control.max_ulp_deviation;
    doc["wide_control_max_abs_deviation"] = control.max_abs_deviation;
  }
  doc["checks"] = checks_json(r);
  w.json_file("resume_check.json", doc);
  return r;
}

Report report_masks(const RunConfig& cfg, const fs::path& out) {
  using namespace toymodel;
  Report r{"mask-dump", {}, {}};
  Writer w(out, r);
  const SequenceLayout& layout = cfg.transformer.layout;
  const std::size_t k = cfg.transformer.conv_kernel;
  const std::vector<std::pair<std::string, MaskMatrix>> masks = {
      {"row", build_row_mask(layout)},
      {"column", build_column_mask(layout, false)},
      {"column_transposed", build_column_mask(layout, true)},
      {"conv", build_conv_mask(layout, k)},
  };
  json doc;
  for (const auto& [name, mask] : masks) {
    w.text("mask_" + name + ".txt", mask.to_ascii());
    w.text("mask_" + name + ".pgm", mask.to_pgm());
    doc["allowed_counts"][name] = mask.allowed_count();
    check(r, name + " mask structure", satisfies_structure(mask), "causal, image sees all text");
  }
  std::map<std::string, std::size_t> counts;
  json schedule = json::array();
  for (std::size_t i = 1; i <= cfg.mask_layers; ++i) {
    const std::string kind(mask_kind_name(layer_mask_kind(i, cfg.mask_layers)));
    ++counts[kind];
    schedule.push_back(kind);
  }
  doc["layers"] = cfg.mask_layers;
  doc["schedule"] = schedule;
  doc["kind_counts"] = counts;
  if (cfg.mask_layers == 64) {
    const bool ok = counts["row"] == 48 && counts["column"] == 15 && counts["conv"] == 1;
    check(r, "layer kinds for 64 layers are 48/15/1", ok,
          std::to_string(counts["row"]) + "/" + std::to_string(counts["column"]) + "/" +
              std::to_string(counts["conv"]));
  }
  doc["checks"] = checks_json(r);
  w.json_file("masks.json", doc);
  return r;
}

Report report_formats(const RunConfig& cfg, const fs::path& out) {
  Report r{"format-inspect", {}, {}};
  Writer w(out, r);
  json doc = json::object();
  for (const std::string& name : cfg.format_names) {
    const auto f = lowp::format_by_name(name);
    if (!f) throw std::invalid_argument("unknown format '" + name + "'");
    const lowp::FormatCensus c = lowp::census(*f);
    doc[f->name] = {{"sign_bits", f->sign_bits},
                    {"exponent_bits", f->exponent_bits},
                    {"significand_bits", f->significand_bits},
                    {"bias", f->bias},
                    {"reserves_inf_nan", f->reserves_inf_nan},
                    {"supports_subnormals", f->supports_subnormals},
                    {"max_finite", lowp::max_finite(*f)},
                    {"min_positive", lowp::min_positive(*f)},
                    {"min_normal", lowp::min_normal(*f)},
                    {"census",
                     {{"finite_codes", c.finite_codes},
                      {"subnormal_codes", c.subnormal_codes},
                      {"zero_codes", c.zero_codes},
                      {"infinite_codes", c.infinite_codes},
                      {"nan_codes", c.nan_codes},
                      {"distinct_finite_values", c.distinct_finite_values}}}};
    if (*f == lowp::fp16()) {
      check(r, "fp16 max finite is 65504", lowp::max_finite(*f) == 65504.0, "");
    } else if (*f == lowp::m169()) {
      check(r, "1-6-9 max finite is (2 - 2^-9) * 8", lowp::max_finite(*f) == (2.0 - std::ldexp(1.0, -9)) * 8.0,
            fmt_double(lowp::max_finite(*f)));
    } else if (*f == lowp::u0610()) {
      check(r, "0-6-10 max finite exceeds the variance clamp 5", lowp::max_finite(*f) > 5.0,
            fmt_double(lowp::max_finite(*f)));
    }
  }
  w.json_file("formats.json", doc);
  return r;
}

Report report_train(const RunConfig& cfg, const fs::path& out) {
  Report r{"train", {}, {}};
  Writer w(out, r);
  Trainer t(cfg, make_task(cfg));
  std::ostringstream log, scales;
  log << "step,loss,global_norm,skipped,nonfinite_blocks,lr\n";
  scales << "step,resblock,log2_scale\n";
  for (std::int64_t s = 0; s < cfg.steps; ++s) {
    t.step();
    const StepRecord& rec = t.history().back();
    log << rec.step << ',' << fmt_double(rec.loss) << ',' << fmt_double(rec.global_norm) << ','
        << (rec.skipped ? 1 : 0) << ',' << rec.nonfinite_blocks << ',' << fmt_double(rec.lr)
        << '\n';
    if (cfg.mixed_precision) {
      const auto sc = t.scales();
      for (std::size_t b = 0; b < sc.size(); ++b) {
        scales << rec.step << ',' << b << ',' << fmt_double(std::log2(sc[b])) << '\n';
      }
    }
  }
  std::size_t nonfinite_norm_steps = 0;
  for (const StepRecord& rec : t.history()) {
    if (!std::isfinite(rec.global_norm)) ++nonfinite_norm_steps;
  }
  check(r, "skipped updates equal nonfinite-norm steps",
        nonfinite_norm_steps == t.skipped_updates(),
        std::to_string(t.skipped_updates()) + " skipped");
  const double eval = t.eval_loss();
  check(r, "final evaluation loss is finite", std::isfinite(eval), fmt_double(eval));
  json doc;
  doc["task"] = task_name(cfg.task);
  doc["steps"] = t.steps_done();
  doc["updates"] = t.updates();
  doc["skipped"] = t.skipped_updates();
  doc["final_eval_loss"] = eval;
  doc["ewia_eval_loss"] = t.task().eval_loss(t.ewia_params());
  doc["grad_divisor"] = t.grad_divisor();
  doc["p_scale"] = t.p_scale();
  doc["q_scale"] = t.q_scale();
  doc["ledger_bytes"] = t.ledger_totals().bytes;
  doc["ledger_ops"] = t.ledger_totals().ops;
  doc["checks"] = checks_json(r);
  w.text("train_log.csv", log.str());
  if (cfg.mixed_precision) w.text("scale_trajectory.csv", scales.str());
  w.json_file("train_summary.json", doc);
  t.save_checkpoint(out / "checkpoint.json");
  r.files.push_back("checkpoint.json");
  return r;
}

using ReportFn = std::function<Report(const RunConfig&, const fs::path&)>;

const std::vector<std::pair<std::string, ReportFn>>& recipes() {
  static const std::vector<std::pair<std::string, ReportFn>> table = {
      {"train", report_train},
      {"compression-table", report_compression_table},
      {"qpolicy-ab", report_qpolicy},
      {"underflow-demo", report_underflow},
      {"rank-gap", report_rank_gap},
      {"dvae-anneal", report_dvae},
      {"resume-check", report_resume},
      {"mask-dump", report_masks},
      {"format-inspect", report_formats},
      {"bandwidth-report", report_bandwidth},
  };
  return table;
}

}  // namespace

bool Report::all_passed() const {
  return std::all_of(checks.begin(), checks.end(), [](const Check& c) { return c.passed; });
}

const std::vector<std::string>& experiment_names() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> n;
    for (const auto& [name, fn] : recipes()) n.push_back(name);
    return n;
  }();
  return names;
}

Report run_experiment(const std::string& name, const RunConfig& cfg, const fs::path& out_dir) {
  for (const auto& [n, fn] : recipes()) {
    if (n == name) return fn(cfg, out_dir);
  }
  throw std::invalid_argument("unknown experiment '" + name + "'");
}

// ------------------------------------------------------------- recipes

std::vector<CompressionRow> compression_table(const RunConfig& cfg) {
  std::vector<CompressionRow> rows;
  for (const auto& [d, r, m] : cfg.table_triples) {
    if (r == 0 || r > d) throw std::invalid_argument("compression-table: need 1 <= r <= d");
    rows.push_back({d, r, m, shardplan::compression_rate(d, r, m), published_rate(d, r, m)});
  }
  return rows;
}

BandwidthResult bandwidth_exchange(std::size_t d, std::size_t m, std::size_t r,
                                   std::size_t machines, std::uint64_t seed) {
  using cluster::Group;
  using cluster::ReduceOp;
  const auto plan = shardplan::plan_resblock(d, m);
  if (r % m != 0) throw std::invalid_argument("bandwidth-report: r must be divisible by m");
  cluster::SimCluster cl({machines, m, seed});
  Rng rng(seed);

  powersgd::CompressionConfig cc;
  cc.rank = r / m;
  // [machine][spec][gpu]
  std::vector<std::vector<std::vector<powersgd::LowRankState>>> states(
      machines, std::vector<std::vector<powersgd::LowRankState>>(plan.size()));
  std::vector<std::vector<std::vector<Tensor>>> grads(
      machines, std::vector<std::vector<Tensor>>(plan.size()));
  for (std::size_t s = 0; s < plan.size(); ++s) {
    const auto& spec = plan[s];
    // Every GPU holds its shard; the all-gather materializes full matrices.
    std::vector<Tensor> shards;
    for (std::size_t k = 0; k < m; ++k) shards.emplace_back(spec.shard_rows, spec.shard_cols);
    cluster::OpLabel gather;
    gather.tag = "params";
    gather.resblock = 0;
    gather.overlappable = true;
    cl.all_gather(shards, spec.shard_axis, 32, gather);
    for (std::size_t i = 0; i < machines; ++i) {
      for (std::size_t k = 0; k < m; ++k) {
        cc.q_seed = derive_seed({seed, s, k});
        powersgd::LowRankState st(spec.shard_rows, spec.shard_cols, cc);
        Tensor g = Tensor::gaussian(spec.shard_rows, spec.shard_cols, rng, 0.01);
        st.accumulate_error(g, 1.0, true);
        states[i][s].push_back(std::move(st));
        grads[i][s].push_back(std::move(g));
      }
    }
  }
  for (std::size_t k = 0; k < m; ++k) {
    cluster::OpLabel lp;
    lp.resblock = 0;
    lp.ordinal = static_cast<int>(k);
    std::vector<std::vector<Tensor>> buf(machines);
    for (std::size_t i = 0; i < machines; ++i) {
      for (std::size_t s = 0; s < plan.size(); ++s) buf[i].push_back(states[i][s][k].compute_p());
    }
    lp.tag = "P";
    auto pr = cl.grouped_all_reduce(buf, ReduceOp::kMean, Group::kInter, &lowp::m169(), true, lp);
    for (std::size_t i = 0; i < machines; ++i) {
      for (std::size_t s = 0; s < plan.size(); ++s) states[i][s][k].set_p(pr[s].value);
    }
    for (std::size_t i = 0; i < machines; ++i) {
      buf[i].clear();
      for (std::size_t s = 0; s < plan.size(); ++s) buf[i].push_back(states[i][s][k].compute_q());
    }
    lp.tag = "Q";
    cl.grouped_all_reduce(buf, ReduceOp::kSum, Group::kInter, &lowp::m169(), true, lp);
    for (std::size_t i = 0; i < machines; ++i) {
      buf[i].clear();
      for (std::size_t s = 0; s < plan.size(); ++s) buf[i].push_back(grads[i][s][k]);
    }
    // The uncompressed comparison sends the same gradients at the same
    // 16-bit width as the factors.
    lp.tag = "G";
    cl.grouped_all_reduce(buf, ReduceOp::kSum, Group::kInter, &lowp::fp16(), false, lp);
  }

  BandwidthResult out;
  out.measured = shardplan::measured_rate(cl.ledger());
  out.analytic = shardplan::compression_rate(d, r, m);
  out.exact = shardplan::rate_matches_exactly(out.measured, d, r, m);
  out.ledger = cl.ledger();
  for (const auto& spec : plan) out.gathered_elements += spec.full_rows * spec.full_cols;
  out.peak_live_elements = 2 * out.gathered_elements;
  return out;
}

std::vector<PolicyResult> qpolicy_ab(const RunConfig& cfg) {
  std::vector<PolicyResult> out;
  for (powersgd::QPolicy policy :
       {powersgd::QPolicy::kFixed, powersgd::QPolicy::kWarmStart, powersgd::QPolicy::kResample}) {
    PolicyResult pr;
    pr.policy = policy;
    for (std::uint64_t seed : cfg.qpolicy_seeds) {
      RunConfig c = cfg;
      c.seed = seed;
      c.compression = true;
      c.q_policy = policy;
      Trainer t(c, make_task(c));
      t.run(c.steps);
      pr.losses.push_back(t.eval_loss());
    }
    double sum = 0;
    for (double l : pr.losses) sum += l;
    pr.mean = pr.losses.empty() ? 0.0 : sum / static_cast<double>(pr.losses.size());
    out.push_back(std::move(pr));
  }
  return out;
}

namespace {

// Gradient reaching block b: sign * 2^(e), e = base - b*log2(1/decay) + N(0,1)
// clipped to +-4, with a few outliers 2^20 above the block's median.
void draw_block(Rng& rng, std::size_t block, double decay, bool outliers, std::size_t n,
                std::vector<double>& out) {
  constexpr double kBaseExponent = -17.0;
  constexpr double kOutlierOffset = 20.0;
  constexpr std::size_t kOutliers = 4;
  const double center = kBaseExponent + static_cast<double>(block) * std::log2(decay);
  out.resize(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double z = std::clamp(rng.normal(), -4.0, 4.0);
    const double sign = rng.uniform() < 0.5 ? -1.0 : 1.0;
    out[i] = sign * std::exp2(center + z);
  }
  if (outliers) {
    for (std::size_t j = 0; j < std::min(kOutliers, n); ++j) {
      out[rng.below(n)] = std::exp2(center + kOutlierOffset);
    }
  }
}

std::size_t count_underflow(const std::vector<double>& g, double scale) {
  std::size_t zeros = 0;
  for (double v : g) {
    if (v != 0.0 && lowp::quantize(v * scale, lowp::fp16()) == 0.0) ++zeros;
  }
  return zeros;
}

UnderflowArm run_chain(const RunConfig& cfg, bool per_resblock, bool outliers, std::string name) {
  constexpr std::size_t kDynamicsElements = 64;
  constexpr std::size_t kMeasureElements = 4096;
  const std::size_t R = cfg.underflow_blocks;
  Rng rng(derive_seed({cfg.seed, 0x0f, per_resblock ? 1u : 0u, outliers ? 1u : 0u}));
  std::vector<gradscale::ResblockScaler> scalers(per_resblock ? R : 1, gradscale::ResblockScaler(1));
  UnderflowArm arm;
  arm.name = std::move(name);
  arm.per_resblock = per_resblock;
  arm.outliers = outliers;
  std::vector<double> g;
  for (std::int64_t t = 0; t < cfg.underflow_steps; ++t) {
    std::vector<bool> finite(R, true);
    for (std::size_t b = 0; b < R; ++b) {
      draw_block(rng, b, cfg.underflow_decay, outliers, kDynamicsElements, g);
      const double s = scalers[per_resblock ? b : 0].scale();
      const Tensor scaled_g = gradscale::scale_incoming(Tensor(g.size(), 1, g), s);
      finite[b] = all_finite(scaled_g);
    }
    if (per_resblock) {
      for (std::size_t b = 0; b < R; ++b) arm.backoffs += scalers[b].on_step(finite[b], t + 1).backed_off;
    } else {
      const bool all = std::all_of(finite.begin(), finite.end(), [](bool f) { return f; });
      arm.backoffs += scalers[0].on_step(all, t + 1).backed_off;
    }
  }
  for (std::size_t b = 0; b < R; ++b) {
    draw_block(rng, b, cfg.underflow_decay, outliers, kMeasureElements, g);
    const double s = scalers[per_resblock ? b : 0].scale();
    const std::size_t zeros = count_underflow(g, s);
    arm.zero_fraction.push_back(static_cast<double>(zeros) / static_cast<double>(g.size()));
    arm.log2_scale.push_back(std::log2(s));
    arm.total_zeros += zeros;
    if (b + 1 == R) {
      arm.last_block_zeros = zeros;
      arm.last_block_elements = g.size();
    }
  }
  return arm;
}

}  // namespace

UnderflowResult underflow_demo(const RunConfig& cfg) {
  if (cfg.underflow_blocks == 0) throw std::invalid_argument("underflow-demo: need >= 1 block");
  if (!(cfg.underflow_decay > 0 && cfg.underflow_decay <= 1)) {
    throw std::invalid_argument("underflow-demo: decay must be in (0, 1]");
  }
  UnderflowResult u;
  u.arms.push_back(run_chain(cfg, false, true, "global"));
  u.arms.push_back(run_chain(cfg, true, true, "per_resblock"));
  u.arms.push_back(run_chain(cfg, false, false, "global_no_outliers"));
  return u;
}

std::vector<RankGapRow> rank_gap(const RunConfig& cfg) {
  auto tail_loss = [](const Trainer& t) {
    const auto& h = t.history();
    const std::size_t n = std::max<std::size_t>(1, h.size() / 10);
    double sum = 0;
    for (std::size_t i = h.size() - n; i < h.size(); ++i) sum += h[i].loss;
    return sum / static_cast<double>(n);
  };
  RunConfig base = cfg;
  base.compression = false;
  Trainer b(base, make_task(base));
  b.run(base.steps);
  const double baseline = tail_loss(b);
  std::vector<RankGapRow> rows;
  for (std::size_t rank : cfg.rank_gap_ranks) {
    RunConfig c = cfg;
    c.compression = true;
    c.rank = rank;
    c.validate();
    Trainer t(c, make_task(c));
    t.run(c.steps);
    const double loss = tail_loss(t);
    rows.push_back({rank, loss, baseline, (loss - baseline) / baseline});
  }
  return rows;
}

DvaeAnnealResult dvae_anneal(const RunConfig& cfg) {
  using toymodel::ToyDvae;
  const ToyDvae model(toymodel::DvaeConfig{});
  const std::int64_t T = std::max<std::int64_t>(1, cfg.dvae_steps);
  const optim::Schedule tau_sched{optim::ScheduleKind::kCosine, 1.0, 1.0 / 16.0, T};
  const optim::Schedule beta_sched{optim::ScheduleKind::kCosine, 0.0, 1.0, std::max<std::int64_t>(1, T / 3)};
  const optim::Schedule lr_sched{optim::ScheduleKind::kCosine, 2e-3, 1e-4, T};
  const optim::HyperParams hp = optim::HyperParams::dvae();

  std::vector<Tensor> params = model.init_params(derive_seed({cfg.seed, 0xdae}));
  std::vector<optim::AdamWState> states;
  for (const Tensor& p : params) {
    states.push_back(optim::make_adamw_state_like(p, optim::MomentPrecision::kFull));
  }
  Rng data_rng(derive_seed({cfg.seed, 0xda7a}));
  Rng noise_rng(derive_seed({cfg.seed, 0x9b1}));
  Rng held_rng(derive_seed({cfg.seed, 0x4e1d}));
  const Tensor held_out = toymodel::make_pattern_batch(64, model.config().image_side, held_rng);
  const std::uint64_t eval_seed = derive_seed({cfg.seed, 0xe7a1});
  constexpr std::size_t kEvalSamples = 8;

  DvaeAnnealResult out;
  const std::int64_t checkpoints = 4;
  for (std::int64_t t = 0; t <= T; ++t) {
    if (t % std::max<std::int64_t>(1, T / checkpoints) == 0 || t == T) {
      const double tau = tau_sched.value(t);
      out.trajectory.push_back({tau, model.evaluate(params, held_out, tau, eval_seed, kEvalSamples)});
    }
    if (t == T) break;
    const Tensor images = toymodel::make_pattern_batch(cfg.dvae_batch, model.config().image_side, data_rng);
    const Tensor noise = model.draw_noise(cfg.dvae_batch, noise_rng);
    const toymodel::DvaeLoss l =
        model.loss_and_grads(params, images, noise, tau_sched.value(t), beta_sched.value(t));
    out.final_train_loss = l.loss;
    for (std::size_t p = 0; p < params.size(); ++p) {
      optim::adamw_step(params[p], l.grads[p], states[p], hp, lr_sched.value(t),
                        model.param_infos()[p].weight_decay);
    }
  }
  for (double tau = 1.0; tau >= 1.0 / 16.0; tau /= 2.0) {
    out.final_model.push_back({tau, model.evaluate(params, held_out, tau, eval_seed, kEvalSamples)});
  }
  return out;
}

ResumeResult resume_check(const RunConfig& cfg, const fs::path& scratch_dir) {
  if (cfg.resume_save_step < 0 || cfg.resume_extra_steps < 1) {
    throw std::invalid_argument("resume-check: need save step >= 0 and extra steps >= 1");
  }
  RunConfig c = cfg;
  c.compression = true;
  const auto task = make_task(c);
  Trainer uninterrupted(c, task);
  uninterrupted.run(c.resume_save_step);
  Trainer first_leg(c, task);
  first_leg.run(c.resume_save_step);
  fs::create_directories(scratch_dir);
  const fs::path ckpt = scratch_dir / "resume_checkpoint.json";
  first_leg.save_checkpoint(ckpt);
  Trainer resumed(c, task);
  resumed.load_checkpoint(ckpt);

  ResumeResult res;
  for (std::int64_t s = 0; s < c.resume_extra_steps; ++s) {
    uninterrupted.step();
    resumed.step();
    const auto& a = uninterrupted.last_update_grads();
    const auto& b = resumed.last_update_grads();
    double step_max = 0.0;
    for (std::size_t p = 0; p < a.size(); ++p) {
      if (!uninterrupted.is_sharded(p)) continue;
      for (std::size_t k = 0; k < a[p].size(); ++k) {
        for (std::size_t e = 0; e < a[p][k].size(); ++e) {
          const double x = a[p][k][e];
          const double y = b[p][k][e];
          const double dev = lowp::ulp_distance(x, y, lowp::m169());
          step_max = std::max(step_max, dev);
          res.max_abs_deviation = std::max(res.max_abs_deviation, std::fabs(x - y));
          ++res.elements_compared;
        }
      }
    }
    res.per_step_max_ulp.push_back(step_max);
    res.max_ulp_deviation = std::max(res.max_ulp_deviation, step_max);
    ++res.steps_compared;
  }
  return res;
}

}  // namespace shardsim::harness
