// Copyright 2026 The shardsim Authors
// SPDX-License-Identifier: Apache-2.0

#include "shardsim/harness/trainer.hpp"

#include <atomic>
#include <cmath>
#include <exception>
#include <fstream>
#include <functional>
#include <limits>
#include <sstream>
#include <stdexcept>
#include <thread>

#include "json.hpp"

#include "shardsim/lowp.hpp"
#include "shardsim/rng.hpp"

namespace shardsim::harness {
namespace {

using nlohmann::json;
using cluster::Group;
using cluster::OpLabel;
using cluster::ReduceOp;

constexpr char kCheckpointFormat[] = "shardsim-checkpoint-1";

void parallel_for(std::size_t n, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  if (threads <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  const std::size_t workers = std::min(threads, n);
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = next++; i < n; i = next++) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (std::thread& t : pool) t.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

OpLabel label(std::string tag, int resblock, int ordinal, std::int64_t step,
              bool overlappable = false) {
  OpLabel l;
  l.tag = std::move(tag);
  l.resblock = resblock;
  l.ordinal = ordinal;
  l.step = step;
  l.overlappable = overlappable;
  return l;
}

json encode_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  return v;
}

double decode_double(const json& v) {
  if (v.is_number()) return v.get<double>();
  if (v.is_string()) {
    const std::string s = v.get<std::string>();
    if (s == "nan") return std::numeric_limits<double>::quiet_NaN();
    if (s == "inf") return std::numeric_limits<double>::infinity();
    if (s == "-inf") return -std::numeric_limits<double>::infinity();
  }
  throw std::invalid_argument("checkpoint: malformed number");
}

json encode_tensor(const Tensor& t) {
  json data = json::array();
  for (double v : t.values()) data.push_back(encode_double(v));
  return json{{"rows", t.rows()}, {"cols", t.cols()}, {"rank", t.rank()}, {"data", data}};
}

Tensor decode_tensor(const json& j) {
  const auto rows = j.at("rows").get<std::size_t>();
  const auto cols = j.at("cols").get<std::size_t>();
  const int rank = j.at("rank").get<int>();
  const json& data = j.at("data");
  if (data.size() != rows * cols) throw std::invalid_argument("checkpoint: tensor size mismatch");
  std::vector<double> values;
  values.reserve(data.size());
  for (const json& v : data) values.push_back(decode_double(v));
  if (rank == 1) return Tensor::vector(std::move(values));
  return Tensor(rows, cols, std::move(values));
}

json encode_optional(const std::optional<std::int64_t>& v) {
  return v ? json(*v) : json(nullptr);
}

std::optional<std::int64_t> decode_optional(const json& v) {
  if (v.is_null()) return std::nullopt;
  return v.get<std::int64_t>();
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
  if (!a.same_shape(b)) throw std::invalid_argument(std::string("checkpoint: shape mismatch in ") + what);
}

}  // namespace

Trainer::Trainer(RunConfig cfg, std::shared_ptr<const Task> task)
    : cfg_(std::move(cfg)), task_(std::move(task)), cluster_(cfg_.topology) {
  cfg_.validate();
  if (!task_) throw std::invalid_argument("Trainer: task is null");
  infos_ = task_->param_infos();
  n_ = cfg_.topology.n_machines;
  m_ = cfg_.topology.gpus_per_machine;

  sharded_.resize(infos_.size());
  for (std::size_t p = 0; p < infos_.size(); ++p) {
    const auto& info = infos_[p];
    sharded_[p] = info.compressed && !info.is_vector;
    if (sharded_[p]) {
      const std::size_t extent = info.shard_axis == 0 ? info.rows : info.cols;
      if (extent % m_ != 0) {
        throw std::invalid_argument("parameter " + info.name + " cannot be sharded over " +
                                    std::to_string(m_) + " GPUs");
      }
    }
  }

  const std::vector<Tensor> init = task_->init_params(cfg_.seed);
  const auto precision =
      cfg_.low_precision_moments ? optim::MomentPrecision::kLow : optim::MomentPrecision::kFull;
  if (cfg_.p_scale) p_scale_ = *cfg_.p_scale, p_ready_ = true;
  if (cfg_.q_scale) q_scale_ = *cfg_.q_scale, q_ready_ = true;
  if (cfg_.grad_divisor) divisor_ = *cfg_.grad_divisor, divisor_ready_ = true;
  if (!cfg_.mixed_precision) divisor_ready_ = true;

  params_.resize(n_);
  adam_.resize(n_);
  lowrank_.resize(n_);
  for (std::size_t i = 0; i < n_; ++i) {
    params_[i].resize(infos_.size());
    adam_[i].resize(infos_.size());
    lowrank_[i].resize(infos_.size());
    for (std::size_t p = 0; p < infos_.size(); ++p) {
      const std::size_t shards = shard_count(p);
      for (std::size_t k = 0; k < shards; ++k) {
        Tensor piece = init[p];
        if (sharded_[p]) {
          const int axis = infos_[p].shard_axis;
          const std::size_t width = (axis == 0 ? init[p].rows() : init[p].cols()) / m_;
          piece = slice(init[p], axis, k * width, width);
        }
        adam_[i][p].push_back(optim::make_adamw_state_like(piece, precision));
        if (compressed(p)) {
          powersgd::CompressionConfig cc;
          cc.rank = cfg_.rank_per_gpu();
          cc.epsilon = cfg_.epsilon;
          cc.p_scale = p_scale_;
          cc.q_scale = q_scale_;
          cc.q_seed = derive_seed({cfg_.seed, 0x51, p, k});
          cc.q_policy = cfg_.q_policy;
          cc.low_precision = cfg_.factor_low_precision;
          lowrank_[i][p].emplace_back(piece.rows(), piece.cols(), cc);
        }
        params_[i][p].push_back(std::move(piece));
      }
    }
  }
  ewia_.resize(infos_.size());
  for (std::size_t p = 0; p < infos_.size(); ++p) ewia_[p] = params_[0][p];
  for (std::size_t b = 0; b < task_->resblock_count(); ++b) scalers_.emplace_back(n_);
}

std::vector<double> Trainer::scales() const {
  std::vector<double> s(task_->resblock_count(), 1.0);
  if (cfg_.mixed_precision) {
    for (std::size_t b = 0; b < s.size(); ++b) s[b] = scalers_[b].scale();
  }
  return s;
}

const powersgd::LowRankState& Trainer::lowrank(std::size_t machine, std::size_t param,
                                               std::size_t gpu) const {
  if (!compressed(param)) throw std::invalid_argument("Trainer::lowrank: parameter not compressed");
  return lowrank_.at(machine).at(param).at(gpu);
}

std::vector<Tensor> Trainer::params(std::size_t machine) const {
  std::vector<Tensor> out;
  out.reserve(infos_.size());
  for (std::size_t p = 0; p < infos_.size(); ++p) {
    const auto& shards = params_.at(machine)[p];
    out.push_back(sharded_[p] ? concat(shards, infos_[p].shard_axis) : shards[0]);
  }
  return out;
}

std::vector<Tensor> Trainer::ewia_params() const {
  std::vector<Tensor> out;
  for (std::size_t p = 0; p < infos_.size(); ++p) {
    out.push_back(sharded_[p] ? concat(ewia_[p], infos_[p].shard_axis) : ewia_[p][0]);
  }
  return out;
}

double Trainer::eval_loss(std::size_t machine) const { return task_->eval_loss(params(machine)); }

void Trainer::inject_nonfinite(std::int64_t step, int block) {
  inject_step_ = step;
  inject_block_ = block;
}

void Trainer::calibrate_divisor(const std::vector<Tensor>& full,
                                const std::vector<double>& scales) {
  toymodel::BackwardOptions wide;
  const TaskGradients g =
      task_->loss_and_grads(full, step_, 0, 1.0 / static_cast<double>(n_), scales, wide);
  std::vector<lowp::ExponentHistogram> hists;
  for (std::size_t p = 0; p < infos_.size(); ++p) {
    if (sharded_[p]) hists.push_back(lowp::exponent_histogram(g.grads[p].values()));
  }
  try {
    divisor_ = gradscale::calibrate_divisor(hists, lowp::fp16()).pre_allreduce_divisor;
    divisor_ready_ = true;
  } catch (const std::invalid_argument&) {
    divisor_ = 1.0;  // no usable values yet; retried next step
  }
}

bool Trainer::calibrate_p() {
  std::vector<lowp::ExponentHistogram> hists;
  for (std::size_t p = 0; p < infos_.size(); ++p) {
    if (!compressed(p)) continue;
    for (const auto& s : lowrank_[0][p]) {
      hists.push_back(lowp::exponent_histogram(s.compute_p_unscaled().values()));
    }
  }
  try {
    const auto& f = lowp::m169();
    p_scale_ = 1.0 / gradscale::calibrate_divisor(hists, f, f.max_exponent() - 8)
                         .pre_allreduce_divisor;
  } catch (const std::invalid_argument&) {
    return false;
  }
  apply_factor_scales();
  return true;
}

bool Trainer::calibrate_q() {
  std::vector<lowp::ExponentHistogram> hists;
  for (std::size_t p = 0; p < infos_.size(); ++p) {
    if (!compressed(p)) continue;
    for (const auto& s : lowrank_[0][p]) {
      hists.push_back(lowp::exponent_histogram(s.compute_q_unscaled().values()));
    }
  }
  try {
    const auto& f = lowp::m169();
    q_scale_ = 1.0 / gradscale::calibrate_divisor(hists, f, f.max_exponent() - 8)
                         .pre_allreduce_divisor;
  } catch (const std::invalid_argument&) {
    return false;
  }
  apply_factor_scales();
  return true;
}

void Trainer::apply_factor_scales() {
  for (auto& machine : lowrank_) {
    for (auto& param : machine) {
      for (auto& s : param) s.set_scales(p_scale_, q_scale_);
    }
  }
}

void Trainer::step() {
  const std::int64_t t = step_;
  const std::size_t P = infos_.size();
  const std::size_t R = task_->resblock_count();
  const lowp::FloatFormatSpec* grad_fmt = cfg_.mixed_precision ? &lowp::fp16() : nullptr;
  const lowp::FloatFormatSpec* factor_fmt = cfg_.factor_low_precision ? &lowp::m169() : nullptr;
  const std::vector<double> s = scales();
  const double inv_n = 1.0 / static_cast<double>(n_);

  // Step 1: gather shards, forward/backward on every GPU.
  std::vector<std::vector<Tensor>> full(n_, std::vector<Tensor>(P));
  for (std::size_t i = 0; i < n_; ++i) {
    for (std::size_t p = 0; p < P; ++p) {
      if (sharded_[p]) {
        full[i][p] = cluster_.all_gather(params_[i][p], infos_[p].shard_axis, 32,
                                         label("params", infos_[p].resblock, -1, t, true))[0];
      } else {
        full[i][p] = params_[i][p][0];
      }
    }
  }
  if (!divisor_ready_) calibrate_divisor(full[0], s);

  std::vector<TaskGradients> results(n_ * m_);
  parallel_for(n_ * m_, cfg_.threads, [&](std::size_t r) {
    const std::size_t i = r / m_;
    const std::size_t k = r % m_;
    toymodel::BackwardOptions opts;
    opts.fp16 = cfg_.mixed_precision;
    opts.grad_divisor = divisor_;
    if (t == inject_step_ && r == 0) opts.inject_nonfinite_block = inject_block_;
    const std::size_t data_index = cfg_.identical_machine_data ? k : r;
    results[r] = task_->loss_and_grads(full[i], t, data_index, inv_n, s, opts);
  });

  std::vector<bool> block_ok(R, true);
  for (const TaskGradients& g : results) {
    for (std::size_t b = 0; b < R; ++b) block_ok[b] = block_ok[b] && g.block_finite[b];
  }
  cluster_.ledger().record("all_reduce", Group::kInter, R, 8, label("flags", -1, -1, t));
  auto param_ok = [&](std::size_t p) {
    const int b = infos_[p].resblock;
    return b < 0 || block_ok[static_cast<std::size_t>(b)];
  };

  // Step 2: reduce-scatter; accumulate into error buffers.
  Grid reduced(n_, std::vector<std::vector<Tensor>>(P));
  std::vector<std::vector<std::vector<char>>> step2_finite(
      n_, std::vector<std::vector<char>>(P));
  for (std::size_t i = 0; i < n_; ++i) {
    for (std::size_t p = 0; p < P; ++p) {
      std::vector<Tensor> per_gpu;
      per_gpu.reserve(m_);
      for (std::size_t k = 0; k < m_; ++k) per_gpu.push_back(std::move(results[i * m_ + k].grads[p]));
      const int rb = infos_[p].resblock;
      if (sharded_[p]) {
        reduced[i][p] = cluster_.reduce_scatter_avg(per_gpu, infos_[p].shard_axis, grad_fmt,
                                                    label("RS", rb, -1, t, true));
      } else {
        reduced[i][p] = {cluster_.all_reduce(per_gpu, ReduceOp::kMean, Group::kIntra, nullptr,
                                             false, label("U", rb, -1, t))
                             .value};
      }
      if (!compressed(p)) continue;
      const double sp = rb >= 0 ? s[static_cast<std::size_t>(rb)] : 1.0;
      step2_finite[i][p].resize(m_);
      for (std::size_t k = 0; k < m_; ++k) {
        auto& state = lowrank_[i][p][k];
        state.accumulate_error(reduced[i][p][k], sp, param_ok(p) && all_finite(reduced[i][p][k]));
        step2_finite[i][p][k] = all_finite(state.error_buffer());
      }
    }
  }

  // Factor groups: every compressed parameter of one resblock on one GPU
  // ordinal travels in a single grouped all-reduce.
  std::map<std::pair<int, std::size_t>, std::vector<std::size_t>> groups;
  for (std::size_t p = 0; p < P; ++p) {
    if (!compressed(p)) continue;
    for (std::size_t k = 0; k < m_; ++k) groups[{infos_[p].resblock, k}].push_back(p);
  }
  std::vector<std::vector<char>> pq_finite(P, std::vector<char>(m_, 1));

  // Steps 3-5: P.
  if (!p_ready_ && !groups.empty()) p_ready_ = calibrate_p();
  for (const auto& [key, members] : groups) {
    const std::size_t k = key.second;
    std::vector<std::vector<Tensor>> buffers(n_);
    for (std::size_t i = 0; i < n_; ++i) {
      for (std::size_t p : members) buffers[i].push_back(lowrank_[i][p][k].compute_p());
    }
    const auto out = cluster_.grouped_all_reduce(buffers, ReduceOp::kMean, Group::kInter,
                                                 factor_fmt, true,
                                                 label("P", key.first, static_cast<int>(k), t));
    for (std::size_t j = 0; j < members.size(); ++j) {
      const std::size_t p = members[j];
      if (out[j].had_nonfinite || !all_finite(out[j].value)) pq_finite[p][k] = 0;
      for (std::size_t i = 0; i < n_; ++i) lowrank_[i][p][k].set_p(out[j].value);
    }
  }

  // Steps 6-7: Q.
  if (!q_ready_ && !groups.empty()) q_ready_ = calibrate_q();
  for (const auto& [key, members] : groups) {
    const std::size_t k = key.second;
    std::vector<std::vector<Tensor>> buffers(n_);
    for (std::size_t i = 0; i < n_; ++i) {
      for (std::size_t p : members) buffers[i].push_back(lowrank_[i][p][k].compute_q());
    }
    const auto out = cluster_.grouped_all_reduce(buffers, ReduceOp::kSum, Group::kInter,
                                                 factor_fmt, true,
                                                 label("Q", key.first, static_cast<int>(k), t));
    for (std::size_t j = 0; j < members.size(); ++j) {
      const std::size_t p = members[j];
      if (out[j].had_nonfinite || !all_finite(out[j].value)) pq_finite[p][k] = 0;
      for (std::size_t i = 0; i < n_; ++i) lowrank_[i][p][k].set_q(out[j].value);
    }
  }

  // Step 8: 32-bit cross-machine sums of every gradient not sent as factors.
  Grid grads(n_, std::vector<std::vector<Tensor>>(P));
  {
    std::vector<std::size_t> replicated;
    for (std::size_t p = 0; p < P; ++p) {
      if (!sharded_[p]) replicated.push_back(p);
    }
    if (!replicated.empty()) {
      std::vector<std::vector<Tensor>> buffers(n_);
      for (std::size_t i = 0; i < n_; ++i) {
        for (std::size_t p : replicated) buffers[i].push_back(reduced[i][p][0]);
      }
      const auto out = cluster_.grouped_all_reduce(buffers, ReduceOp::kSum, Group::kInter,
                                                   nullptr, false, label("U", -1, -1, t));
      for (std::size_t j = 0; j < replicated.size(); ++j) {
        for (std::size_t i = 0; i < n_; ++i) grads[i][replicated[j]] = {out[j].value};
      }
    }
    std::map<std::pair<int, std::size_t>, std::vector<std::size_t>> plain;
    for (std::size_t p = 0; p < P; ++p) {
      if (sharded_[p] && !cfg_.compression) {
        for (std::size_t k = 0; k < m_; ++k) plain[{infos_[p].resblock, k}].push_back(p);
      }
    }
    for (const auto& [key, members] : plain) {
      const std::size_t k = key.second;
      const double sp = key.first >= 0 ? s[static_cast<std::size_t>(key.first)] : 1.0;
      std::vector<std::vector<Tensor>> buffers(n_);
      for (std::size_t i = 0; i < n_; ++i) {
        for (std::size_t p : members) {
          buffers[i].push_back(scaled(divided(reduced[i][p][k], sp), divisor_));
        }
      }
      const auto out = cluster_.grouped_all_reduce(buffers, ReduceOp::kSum, Group::kInter,
                                                   nullptr, false,
                                                   label("G", key.first, static_cast<int>(k), t));
      for (std::size_t j = 0; j < members.size(); ++j) {
        for (std::size_t i = 0; i < n_; ++i) {
          auto& slot = grads[i][members[j]];
          slot.resize(m_);
          slot[k] = out[j].value;
        }
      }
    }
  }

  // Steps 9-10: global norm.
  std::vector<double> q_norms;
  std::vector<double> u_norms;
  bool any_nonfinite = false;
  const double q_unit = divisor_ / q_scale_;
  for (std::size_t p = 0; p < P; ++p) {
    if (compressed(p)) {
      for (std::size_t k = 0; k < m_; ++k) {
        if (!pq_finite[p][k]) any_nonfinite = true;
        q_norms.push_back(squared_norm(lowrank_[0][p][k].q()) * q_unit * q_unit);
      }
    } else if (param_ok(p)) {
      for (const Tensor& g : grads[0][p]) {
        if (!all_finite(g)) any_nonfinite = true;
        u_norms.push_back(squared_norm(g));
      }
    }
  }
  const double norm = optim::global_norm(q_norms, u_norms, any_nonfinite);
  cluster_.ledger().record("all_reduce", Group::kInter, 1, 32, label("norm", -1, -1, t));
  const bool skip = !std::isfinite(norm);

  last_grads_.assign(P, {});
  for (std::size_t p = 0; p < P; ++p) {
    if (compressed(p)) {
      for (std::size_t k = 0; k < m_; ++k) {
        last_grads_[p].push_back(scaled(lowrank_[0][p][k].decompressed(), divisor_));
      }
    } else {
      last_grads_[p] = grads[0][p];
    }
  }

  // Steps 11 and 13: optimizer updates.
  const double lr = cfg_.lr_at(updates_);
  if (!skip) {
    const double coeff = optim::clip_coefficient(norm, cfg_.hyper.clip_threshold);
    for (std::size_t i = 0; i < n_; ++i) {
      for (std::size_t p = 0; p < P; ++p) {
        if (!compressed(p) && !param_ok(p)) continue;
        for (std::size_t k = 0; k < shard_count(p); ++k) {
          Tensor g = compressed(p) ? scaled(lowrank_[i][p][k].decompressed(), divisor_)
                                   : grads[i][p][k];
          if (coeff != 1.0) g = scaled(g, coeff);
          optim::adamw_step(params_[i][p][k], g, adam_[i][p][k], cfg_.hyper, lr,
                            infos_[p].weight_decay);
        }
      }
    }
    ++updates_;
    for (std::size_t p = 0; p < P; ++p) {
      for (std::size_t k = 0; k < shard_count(p); ++k) {
        optim::ewia_update(ewia_[p][k], params_[0][p][k], cfg_.hyper.ewia_decay, updates_,
                           cfg_.hyper.ewia_interval);
      }
    }
  } else {
    ++skipped_;
  }

  // Step 12: error buffers.
  for (std::size_t i = 0; i < n_; ++i) {
    for (std::size_t p = 0; p < P; ++p) {
      if (!compressed(p)) continue;
      for (std::size_t k = 0; k < m_; ++k) {
        auto& state = lowrank_[i][p][k];
        state.update_error(scaled(state.decompressed(), inv_n), pq_finite[p][k],
                           step2_finite[i][p][k]);
      }
    }
  }

  std::size_t bad_blocks = 0;
  for (std::size_t b = 0; b < R; ++b) {
    if (!block_ok[b]) ++bad_blocks;
    if (cfg_.mixed_precision) scalers_[b].on_step(block_ok[b], t + 1);
  }

  StepRecord rec;
  rec.step = t;
  for (const TaskGradients& g : results) rec.loss += g.loss;
  rec.loss /= static_cast<double>(results.size());
  rec.global_norm = norm;
  rec.skipped = skip;
  rec.nonfinite_blocks = bad_blocks;
  rec.lr = lr;
  history_.push_back(rec);
  fold_ledger();
  ++step_;
}

void Trainer::run(std::int64_t steps) {
  for (std::int64_t i = 0; i < steps; ++i) step();
}

void Trainer::fold_ledger() {
  const auto& entries = cluster_.ledger().entries();
  for (std::size_t e = ledger_folded_; e < entries.size(); ++e) {
    const auto& entry = entries[e];
    const std::string key =
        std::string(entry.group == Group::kInter ? "inter:" : "intra:") + entry.label.tag;
    totals_.bytes[key] += entry.logical_bytes;
    totals_.ops[key] += 1;
  }
  if (cfg_.record_ledger) {
    ledger_folded_ = entries.size();
  } else {
    cluster_.ledger().clear();
    ledger_folded_ = 0;
  }
}

std::string Trainer::checkpoint_json() const {
  json doc;
  doc["format"] = kCheckpointFormat;
  doc["machines"] = n_;
  doc["gpus_per_machine"] = m_;
  doc["task"] = task_->name();
  doc["step"] = step_;
  doc["updates"] = updates_;
  doc["skipped"] = skipped_;
  doc["grad_divisor"] = divisor_;
  doc["p_scale"] = p_scale_;
  doc["q_scale"] = q_scale_;
  doc["calibrated"] = {divisor_ready_, p_ready_, q_ready_};
  json params = json::array(), adam = json::array(), ewia = json::array();
  json errors = json::array(), multipliers = json::array(), rounds = json::array();
  for (std::size_t p = 0; p < infos_.size(); ++p) {
    json ps = json::array(), as = json::array(), es = json::array();
    json errs = json::array(), mults = json::array(), rs = json::array();
    for (std::size_t k = 0; k < shard_count(p); ++k) {
      ps.push_back(encode_tensor(params_[0][p][k]));
      const auto& st = adam_[0][p][k];
      as.push_back({{"mean", encode_tensor(st.mean)},
                    {"variance", encode_tensor(st.variance)},
                    {"step", st.step}});
      es.push_back(encode_tensor(ewia_[p][k]));
      if (compressed(p)) {
        // Only the cross-machine sum is kept.
        Tensor sum = lowrank_[0][p][k].error_buffer_original();
        for (std::size_t i = 1; i < n_; ++i) {
          sum = add(sum, lowrank_[i][p][k].error_buffer_original());
        }
        errs.push_back(encode_tensor(sum));
        mults.push_back(encode_tensor(lowrank_[0][p][k].multiplier()));
        rs.push_back(lowrank_[0][p][k].rounds());
      }
    }
    params.push_back(ps);
    adam.push_back(as);
    ewia.push_back(es);
    errors.push_back(errs);
    multipliers.push_back(mults);
    rounds.push_back(rs);
  }
  doc["params"] = params;
  doc["adam"] = adam;
  doc["ewia"] = ewia;
  doc["error_sums"] = errors;
  doc["multipliers"] = multipliers;
  doc["rounds"] = rounds;
  json scalers = json::array();
  for (const auto& sc : scalers_) {
    scalers.push_back({{"scale", sc.scale()},
                       {"last_backoff", encode_optional(sc.last_backoff_step())},
                       {"last_step", encode_optional(sc.last_step())}});
  }
  doc["scalers"] = scalers;
  return doc.dump();
}

void Trainer::save_checkpoint(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out << checkpoint_json();
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

void Trainer::load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::invalid_argument("cannot open checkpoint " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  load_checkpoint_json(ss.str());
}

void Trainer::load_checkpoint_json(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("checkpoint is corrupt: ") + e.what());
  }
  try {
    if (doc.at("format").get<std::string>() != kCheckpointFormat) {
      throw std::invalid_argument("checkpoint: unknown format");
    }
    if (doc.at("machines").get<std::size_t>() != n_ ||
        doc.at("gpus_per_machine").get<std::size_t>() != m_) {
      throw std::invalid_argument("checkpoint: topology mismatch");
    }
    if (doc.at("task").get<std::string>() != task_->name()) {
      throw std::invalid_argument("checkpoint: task mismatch");
    }
    const json& params = doc.at("params");
    if (params.size() != infos_.size()) throw std::invalid_argument("checkpoint: parameter count");

    // Decode everything before touching the trainer state.
    Grid new_params(1, std::vector<std::vector<Tensor>>(infos_.size()));
    std::vector<std::vector<optim::AdamWState>> new_adam(infos_.size());
    std::vector<std::vector<Tensor>> new_ewia(infos_.size()), sums(infos_.size()),
        mults(infos_.size());
    std::vector<std::vector<std::int64_t>> rounds(infos_.size());
    for (std::size_t p = 0; p < infos_.size(); ++p) {
      const std::size_t shards = shard_count(p);
      if (params[p].size() != shards) throw std::invalid_argument("checkpoint: shard count");
      for (std::size_t k = 0; k < shards; ++k) {
        Tensor t = decode_tensor(params[p][k]);
        require_same_shape(t, params_[0][p][k], "params");
        new_params[0][p].push_back(std::move(t));
        const json& a = doc.at("adam").at(p).at(k);
        optim::AdamWState st = adam_[0][p][k];
        Tensor mean = decode_tensor(a.at("mean"));
        Tensor var = decode_tensor(a.at("variance"));
        require_same_shape(mean, st.mean, "adam mean");
        require_same_shape(var, st.variance, "adam variance");
        st.mean = st.mean.format() ? mean.with_format(*st.mean.format()) : mean;
        st.variance = st.variance.format() ? var.with_format(*st.variance.format()) : var;
        st.step = a.at("step").get<std::int64_t>();
        new_adam[p].push_back(std::move(st));
        Tensor e = decode_tensor(doc.at("ewia").at(p).at(k));
        require_same_shape(e, ewia_[p][k], "ewia");
        new_ewia[p].push_back(std::move(e));
        if (compressed(p)) {
          Tensor sum = decode_tensor(doc.at("error_sums").at(p).at(k));
          require_same_shape(sum, params_[0][p][k], "error buffer");
          sums[p].push_back(std::move(sum));
          Tensor mult = decode_tensor(doc.at("multipliers").at(p).at(k));
          require_same_shape(mult, lowrank_[0][p][k].multiplier(), "multiplier");
          mults[p].push_back(std::move(mult));
          rounds[p].push_back(doc.at("rounds").at(p).at(k).get<std::int64_t>());
        }
      }
    }
    const json& sc = doc.at("scalers");
    if (sc.size() != scalers_.size()) throw std::invalid_argument("checkpoint: scaler count");
    std::vector<gradscale::ResblockScaler> new_scalers;
    for (const json& j : sc) {
      new_scalers.push_back(gradscale::ResblockScaler::restore(
          n_, j.at("scale").get<double>(), decode_optional(j.at("last_backoff")),
          decode_optional(j.at("last_step"))));
    }

    step_ = doc.at("step").get<std::int64_t>();
    updates_ = doc.at("updates").get<std::int64_t>();
    skipped_ = doc.at("skipped").get<std::size_t>();
    divisor_ = doc.at("grad_divisor").get<double>();
    p_scale_ = doc.at("p_scale").get<double>();
    q_scale_ = doc.at("q_scale").get<double>();
    divisor_ready_ = doc.at("calibrated").at(0).get<bool>();
    p_ready_ = doc.at("calibrated").at(1).get<bool>();
    q_ready_ = doc.at("calibrated").at(2).get<bool>();
    for (std::size_t i = 0; i < n_; ++i) {
      params_[i] = new_params[0];
      adam_[i] = new_adam;
    }
    ewia_ = new_ewia;
    scalers_ = std::move(new_scalers);
    apply_factor_scales();
    const lowp::FloatFormatSpec* factor_fmt = cfg_.factor_low_precision ? &lowp::m169() : nullptr;
    for (std::size_t p = 0; p < infos_.size(); ++p) {
      if (!compressed(p)) continue;
      for (std::size_t k = 0; k < m_; ++k) {
        const Tensor share = divided(sums[p][k], static_cast<double>(n_));
        const auto copies = cluster_.broadcast(share, 0, cluster::payload_bits(factor_fmt),
                                               label("resume", infos_[p].resblock,
                                                     static_cast<int>(k), step_));
        for (std::size_t i = 0; i < n_; ++i) {
          lowrank_[i][p][k].set_error_buffer(copies[i]);
          lowrank_[i][p][k].set_multiplier(mults[p][k]);
          lowrank_[i][p][k].set_rounds(rounds[p][k]);
        }
      }
    }
    history_.clear();
    fold_ledger();
  } catch (const json::exception& e) {
    throw std::invalid_argument(std::string("checkpoint is malformed: ") + e.what());
  }
}

ReferenceResult reference_train(const RunConfig& cfg, const Task& task) {
  ReferenceResult out;
  out.params = task.init_params(cfg.seed);
  std::vector<optim::AdamWState> states;
  for (const Tensor& p : out.params) {
    states.push_back(optim::make_adamw_state_like(p, optim::MomentPrecision::kFull));
  }
  const std::vector<double> ones(task.resblock_count(), 1.0);
  const auto& infos = task.param_infos();
  for (std::int64_t t = 0; t < cfg.steps; ++t) {
    TaskGradients g = task.loss_and_grads(out.params, t, 0, 1.0, ones, {});
    out.losses.push_back(g.loss);
    std::vector<double> norms;
    bool bad = false;
    for (const Tensor& x : g.grads) {
      bad = bad || !all_finite(x);
      norms.push_back(squared_norm(x));
    }
    const double norm = optim::global_norm({}, norms, bad);
    if (!std::isfinite(norm)) continue;
    const double coeff = optim::clip_coefficient(norm, cfg.hyper.clip_threshold);
    const double lr = cfg.lr_at(states.empty() ? 0 : states[0].step);
    for (std::size_t p = 0; p < out.params.size(); ++p) {
      Tensor grad = coeff != 1.0 ? scaled(g.grads[p], coeff) : g.grads[p];
      optim::adamw_step(out.params[p], grad, states[p], cfg.hyper, lr, infos[p].weight_decay);
    }
  }
  return out;
}

}  // namespace shardsim::harness
