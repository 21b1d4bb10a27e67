// Copyright 2026 The shardsim Authors
// SPDX-License-Identifier: Apache-2.0

#include "shardsim/harness/config.hpp"

#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>

#include "json.hpp"

namespace shardsim::harness {
namespace {

using nlohmann::json;

template <typename T>
T get_as(const json& v, const std::string& key) {
  try {
    return v.get<T>();
  } catch (const json::exception&) {
    throw std::invalid_argument("config key '" + key + "' has the wrong type");
  }
}

std::size_t get_count(const json& v, const std::string& key) {
  if (!v.is_number_integer() || v.get<long long>() < 0) {
    throw std::invalid_argument("config key '" + key + "' must be a nonnegative integer");
  }
  return v.get<std::size_t>();
}

using Setter = std::function<void(RunConfig&, const json&, const std::string&)>;

template <typename Field>
Setter count_field(Field RunConfig::*member) {
  return [member](RunConfig& c, const json& v, const std::string& k) {
    c.*member = static_cast<Field>(get_count(v, k));
  };
}

template <typename Field>
Setter plain_field(Field RunConfig::*member) {
  return [member](RunConfig& c, const json& v, const std::string& k) {
    c.*member = get_as<Field>(v, k);
  };
}

Setter hyper_field(double optim::HyperParams::*member) {
  return [member](RunConfig& c, const json& v, const std::string& k) {
    c.hyper.*member = get_as<double>(v, k);
  };
}

Setter tf_count(std::size_t toymodel::TransformerConfig::*member) {
  return [member](RunConfig& c, const json& v, const std::string& k) {
    c.transformer.*member = get_count(v, k);
  };
}

Setter optional_double(std::optional<double> RunConfig::*member) {
  return [member](RunConfig& c, const json& v, const std::string& k) {
    if (v.is_null()) {
      c.*member = std::nullopt;
    } else {
      c.*member = get_as<double>(v, k);
    }
  };
}

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = {
      {"experiment", plain_field(&RunConfig::experiment)},
      {"task",
       [](RunConfig& c, const json& v, const std::string& k) {
         const auto s = get_as<std::string>(v, k);
         if (s == "linreg") {
           c.task = TaskKind::kLinreg;
         } else if (s == "transformer") {
           c.task = TaskKind::kTransformer;
         } else {
           throw std::invalid_argument("unknown task '" + s + "'");
         }
       }},
      {"seed", plain_field(&RunConfig::seed)},
      {"steps", plain_field(&RunConfig::steps)},
      {"batch_per_gpu", count_field(&RunConfig::batch_per_gpu)},
      {"machines",
       [](RunConfig& c, const json& v, const std::string& k) {
         c.topology.n_machines = get_count(v, k);
       }},
      {"gpus_per_machine",
       [](RunConfig& c, const json& v, const std::string& k) {
         c.topology.gpus_per_machine = get_count(v, k);
       }},
      {"threads", count_field(&RunConfig::threads)},
      {"identical_machine_data", plain_field(&RunConfig::identical_machine_data)},
      {"record_ledger", plain_field(&RunConfig::record_ledger)},
      {"compression", plain_field(&RunConfig::compression)},
      {"rank", count_field(&RunConfig::rank)},
      {"q_policy",
       [](RunConfig& c, const json& v, const std::string& k) {
         c.q_policy = powersgd::parse_q_policy(get_as<std::string>(v, k));
       }},
      {"factor_low_precision", plain_field(&RunConfig::factor_low_precision)},
      {"epsilon", plain_field(&RunConfig::epsilon)},
      {"p_scale", optional_double(&RunConfig::p_scale)},
      {"q_scale", optional_double(&RunConfig::q_scale)},
      {"mixed_precision", plain_field(&RunConfig::mixed_precision)},
      {"low_precision_moments", plain_field(&RunConfig::low_precision_moments)},
      {"grad_divisor", optional_double(&RunConfig::grad_divisor)},
      {"lr_schedule", plain_field(&RunConfig::lr_schedule)},
      {"lr", plain_field(&RunConfig::lr)},
      {"lr_end", plain_field(&RunConfig::lr_end)},
      {"warmup_steps", plain_field(&RunConfig::warmup_steps)},
      {"beta1", hyper_field(&optim::HyperParams::beta1)},
      {"beta2", hyper_field(&optim::HyperParams::beta2)},
      {"adam_eps", hyper_field(&optim::HyperParams::eps)},
      {"weight_decay", hyper_field(&optim::HyperParams::weight_decay)},
      {"clip_threshold", hyper_field(&optim::HyperParams::clip_threshold)},
      {"variance_clamp", hyper_field(&optim::HyperParams::variance_clamp)},
      {"ewia_decay", hyper_field(&optim::HyperParams::ewia_decay)},
      {"ewia_interval",
       [](RunConfig& c, const json& v, const std::string& k) {
         c.hyper.ewia_interval = static_cast<std::int64_t>(get_count(v, k));
       }},
      {"linreg_features",
       [](RunConfig& c, const json& v, const std::string& k) { c.linreg.features = get_count(v, k); }},
      {"linreg_outputs",
       [](RunConfig& c, const json& v, const std::string& k) { c.linreg.outputs = get_count(v, k); }},
      {"linreg_noise",
       [](RunConfig& c, const json& v, const std::string& k) { c.linreg.noise = get_as<double>(v, k); }},
      {"eval_samples",
       [](RunConfig& c, const json& v, const std::string& k) { c.linreg.eval_samples = get_count(v, k); }},
      {"tf_d_model", tf_count(&toymodel::TransformerConfig::d_model)},
      {"tf_layers", tf_count(&toymodel::TransformerConfig::layers)},
      {"tf_heads", tf_count(&toymodel::TransformerConfig::heads)},
      {"tf_text_vocab", tf_count(&toymodel::TransformerConfig::text_vocab)},
      {"tf_image_vocab", tf_count(&toymodel::TransformerConfig::image_vocab)},
      {"tf_conv_kernel", tf_count(&toymodel::TransformerConfig::conv_kernel)},
      {"tf_mlp_mult", tf_count(&toymodel::TransformerConfig::mlp_mult)},
      {"tf_text_len",
       [](RunConfig& c, const json& v, const std::string& k) {
         c.transformer.layout.text_len = get_count(v, k);
       }},
      {"tf_grid",
       [](RunConfig& c, const json& v, const std::string& k) {
         c.transformer.layout.grid_h = c.transformer.layout.grid_w = get_count(v, k);
       }},
      {"table_triples",
       [](RunConfig& c, const json& v, const std::string& k) {
         if (!v.is_array()) throw std::invalid_argument("config key '" + k + "' must be an array");
         c.table_triples.clear();
         for (const json& t : v) {
           if (!t.is_array() || t.size() != 3) {
             throw std::invalid_argument("table_triples entries are [d, r, m]");
           }
           c.table_triples.push_back({get_count(t[0], k), get_count(t[1], k), get_count(t[2], k)});
         }
       }},
      {"qpolicy_seeds", plain_field(&RunConfig::qpolicy_seeds)},
      {"rank_gap_ranks", plain_field(&RunConfig::rank_gap_ranks)},
      {"underflow_blocks", count_field(&RunConfig::underflow_blocks)},
      {"underflow_decay", plain_field(&RunConfig::underflow_decay)},
      {"underflow_steps", plain_field(&RunConfig::underflow_steps)},
      {"dvae_steps", plain_field(&RunConfig::dvae_steps)},
      {"dvae_batch", count_field(&RunConfig::dvae_batch)},
      {"resume_save_step", plain_field(&RunConfig::resume_save_step)},
      {"resume_extra_steps", plain_field(&RunConfig::resume_extra_steps)},
      {"mask_layers", count_field(&RunConfig::mask_layers)},
      {"format_names", plain_field(&RunConfig::format_names)},
      {"bandwidth_d", count_field(&RunConfig::bandwidth_d)},
      {"bandwidth_m", count_field(&RunConfig::bandwidth_m)},
      {"bandwidth_r", count_field(&RunConfig::bandwidth_r)},
      {"bandwidth_machines", count_field(&RunConfig::bandwidth_machines)},
  };
  return table;
}

bool is_power_of_two(double x) {
  int e = 0;
  return x > 0 && std::frexp(x, &e) == 0.5;
}

}  // namespace

optim::HyperParams RunConfig::linreg_hyper() {
  optim::HyperParams hp = optim::HyperParams::transformer();
  hp.weight_decay = 0.0;
  return hp;
}

void RunConfig::validate() const {
  topology.validate();
  hyper.validate();
  if (steps < 0) throw std::invalid_argument("steps must be >= 0");
  if (batch_per_gpu == 0) throw std::invalid_argument("batch_per_gpu must be >= 1");
  if (threads == 0) throw std::invalid_argument("threads must be >= 1");
  if (compression) {
    const std::size_t m = topology.gpus_per_machine;
    if (rank == 0 || rank % m != 0) {
      throw std::invalid_argument("rank must be a positive multiple of gpus_per_machine");
    }
  }
  for (const auto& s : {p_scale, q_scale, grad_divisor}) {
    if (s && !is_power_of_two(*s)) throw std::invalid_argument("scales must be powers of two");
  }
  if (lr_schedule != "cosine" && lr_schedule != "constant" && lr_schedule != "warmup_cosine") {
    throw std::invalid_argument("unknown lr_schedule '" + lr_schedule + "'");
  }
  if (!(lr > 0) || lr_end < 0) throw std::invalid_argument("invalid step size");
  if (task == TaskKind::kLinreg) {
    if (linreg.features == 0 || linreg.outputs == 0 || linreg.eval_samples == 0) {
      throw std::invalid_argument("linreg dimensions must be positive");
    }
    if (linreg.outputs % topology.gpus_per_machine != 0) {
      throw std::invalid_argument("linreg_outputs must be divisible by gpus_per_machine");
    }
  } else {
    transformer.validate();
    if (transformer.d_model % topology.gpus_per_machine != 0) {
      throw std::invalid_argument("tf_d_model must be divisible by gpus_per_machine");
    }
  }
}

double RunConfig::lr_at(std::int64_t updates) const {
  if (lr_schedule == "constant") return lr;
  optim::Schedule cosine{optim::ScheduleKind::kCosine, lr, lr_end, std::max<std::int64_t>(1, steps)};
  if (lr_schedule == "warmup_cosine" && warmup_steps > 0) {
    if (updates < warmup_steps) {
      optim::Schedule warm{optim::ScheduleKind::kLinearWarmup, 0.0, lr, warmup_steps};
      return warm.value(updates + 1);
    }
    cosine.duration = std::max<std::int64_t>(1, steps - warmup_steps);
    return cosine.value(updates - warmup_steps);
  }
  return cosine.value(updates);
}

RunConfig parse_config(const std::string& text) {
  json doc;
  try {
    doc = json::parse(text);
  } catch (const json::parse_error& e) {
    throw std::invalid_argument(std::string("config is not valid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw std::invalid_argument("config must be a JSON object");
  RunConfig cfg;
  const auto& table = setters();
  // The task picks the optimizer defaults, so it is applied before the rest.
  if (doc.contains("task")) {
    table.at("task")(cfg, doc["task"], "task");
    if (cfg.task == TaskKind::kTransformer) cfg.hyper = optim::HyperParams::transformer();
  }
  for (const auto& [key, value] : doc.items()) {
    if (key == "task") continue;
    if (value.is_object()) {
      throw std::invalid_argument("config key '" + key + "': nested objects are not supported");
    }
    const auto it = table.find(key);
    if (it == table.end()) throw std::invalid_argument("unknown config key '" + key + "'");
    it->second(cfg, value, key);
  }
  cfg.validate();
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::invalid_argument("cannot open config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string task_name(TaskKind kind) {
  return kind == TaskKind::kLinreg ? "linreg" : "transformer";
}

}  // namespace shardsim::harness
