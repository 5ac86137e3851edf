#pragma once

#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "ordmoe/common.hpp"
#include "ordmoe/dataset.hpp"
#include "ordmoe/model.hpp"
#include "ordmoe/training.hpp"

namespace ordmoe {

using nlohmann::json;

struct TrainSettings {
  std::size_t steps = 1500;
  std::size_t batch_size = 8;
  std::size_t eval_every = 250;
  std::size_t checkpoint_every = 0;  // 0: final checkpoint only
  OptimizerConfig opt;
  bool baseline = false;  // plain ntp+balance trainer
};

enum class AblationAxis { none, group_count, strategy, reward, layer_scope, group_parity };

inline const char* ablation_axis_name(AblationAxis a) {
  switch (a) {
    case AblationAxis::none: return "none";
    case AblationAxis::group_count: return "group_count";
    case AblationAxis::strategy: return "strategy";
    case AblationAxis::reward: return "reward";
    case AblationAxis::layer_scope: return "layer_scope";
    case AblationAxis::group_parity: return "group_parity";
  }
  return "?";
}

struct ExperimentConfig {
  Task task = Task::copy;
  ModelConfig model;
  DatasetConfig data;
  TrainSettings train;
  std::string out_dir = "runs/exp";
  AblationAxis axis = AblationAxis::none;
  json axis_values = json::array();

  /// Linear strictly decreasing schedule from 1 to 0 for C tiers.
  static std::vector<double> default_rewards(std::size_t tiers) {
    if (tiers <= 1) return {1.0};
    std::vector<double> r(tiers);
    for (std::size_t j = 0; j < tiers; ++j)
      r[j] = static_cast<double>(tiers - 1 - j) / static_cast<double>(tiers - 1);
    return r;
  }

  /// Fill derived fields from the dataset geometry and validate everything.
  void finalize() {
    data.task = task;
    Dataset probe;
    probe.config = data;
    if (model.vocab_size == 0) model.vocab_size = probe.vocab_size();
    if (model.vocab_size < probe.vocab_size())
      throw config_error("model.vocab_size: " + std::to_string(model.vocab_size) +
                         " is too small for data_vocab " + std::to_string(data.data_vocab) +
                         " plus separator");
    if (model.max_seq_len == 0) model.max_seq_len = probe.seq_len();
    if (model.max_seq_len < probe.seq_len())
      throw config_error("model.max_seq_len: " + std::to_string(model.max_seq_len) +
                         " is shorter than the task sequence length " +
                         std::to_string(probe.seq_len()));
    if (model.rewards.rewards.empty())
      model.rewards.rewards = default_rewards(model.grouping.tiers);
    if (train.opt.total_steps == 0) train.opt.total_steps = train.steps;
    try {
      model.validate();
      model.grouping = model.resolved_grouping();
    } catch (const std::exception& e) {
      const std::string what = e.what();
      throw config_error(what.rfind("model: ", 0) == 0 ? what : "model: " + what);
    }
  }
};

namespace cfgdetail {

inline void reject_unknown(const json& obj, const std::set<std::string>& allowed,
                           const std::string& path) {
  for (auto it = obj.begin(); it != obj.end(); ++it)
    if (!allowed.count(it.key()))
      throw config_error(path + it.key() + ": unknown key");
}

template <class T>
void get(const json& obj, const char* key, T& dst, const std::string& path) {
  if (!obj.contains(key)) return;
  try {
    dst = obj.at(key).get<T>();
  } catch (const json::exception& e) {
    throw config_error(path + key + ": " + e.what());
  }
}

inline void get_size(const json& obj, const char* key, std::size_t& dst,
                     const std::string& path) {
  if (!obj.contains(key)) return;
  if (!obj.at(key).is_number_unsigned() && !obj.at(key).is_number_integer())
    throw config_error(path + key + ": expected a non-negative integer");
  const auto v = obj.at(key).get<long long>();
  if (v < 0) throw config_error(path + key + ": must be non-negative");
  dst = static_cast<std::size_t>(v);
}

}  // namespace cfgdetail

inline GroupingStrategy parse_grouping(const json& g, const std::string& path) {
  using namespace cfgdetail;
  GroupingStrategy s;
  reject_unknown(g, {"kind", "tiers", "group_size", "sizes", "start_ranks", "seed",
                     "random_per_batch", "mode", "window"},
                 path);
  std::string kind = "uniform";
  get(g, "kind", kind, path);
  if (kind == "uniform") s.kind = GroupingKind::uniform;
  else if (kind == "high_only") s.kind = GroupingKind::high_only;
  else if (kind == "random") s.kind = GroupingKind::random;
  else if (kind == "uneven") s.kind = GroupingKind::uneven;
  else throw config_error(path + "kind: unknown grouping kind '" + kind + "'");
  get_size(g, "tiers", s.tiers, path);
  s.group_size = 0;
  get_size(g, "group_size", s.group_size, path);
  get(g, "sizes", s.sizes, path);
  get(g, "start_ranks", s.start_ranks, path);
  get(g, "seed", s.seed, path);
  get(g, "random_per_batch", s.random_per_batch, path);
  std::string mode = "dynamic_per_token";
  get(g, "mode", mode, path);
  if (mode == "dynamic_per_token") s.mode = GroupingMode::dynamic_per_token;
  else if (mode == "static_average") s.mode = GroupingMode::static_average;
  else throw config_error(path + "mode: unknown grouping mode '" + mode + "'");
  get_size(g, "window", s.window, path);
  if (s.window < 1) throw config_error(path + "window: must be >= 1");
  return s;
}

inline ExperimentConfig parse_experiment_json(const json& root) {
  using namespace cfgdetail;
  if (!root.is_object()) throw config_error("config: top level must be an object");
  reject_unknown(root, {"task", "out_dir", "model", "grouping", "scope", "rewards",
                        "dataset", "train", "ablation"},
                 "");
  ExperimentConfig cfg;
  cfg.model.rewards.rewards.clear();  // unset until finalize() or an explicit key
  std::string task = "copy";
  get(root, "task", task, "");
  cfg.task = task_from_name(task);
  get(root, "out_dir", cfg.out_dir, "");

  if (root.contains("model")) {
    const auto& m = root.at("model");
    const std::string p = "model.";
    reject_unknown(m, {"vocab_size", "hidden", "num_layers", "heads", "expert_hidden",
                       "num_experts", "top_k", "lambda_erl", "lambda_balance", "seed",
                       "precision", "max_seq_len", "rollout", "rollout_temperature",
                       "router_bias", "activation", "sample_std_advantages",
                       "stop_lower_tier_grad", "init_std"},
                   p);
    cfg.model.vocab_size = 0;
    cfg.model.max_seq_len = 0;
    get_size(m, "vocab_size", cfg.model.vocab_size, p);
    get_size(m, "hidden", cfg.model.hidden, p);
    get_size(m, "num_layers", cfg.model.num_layers, p);
    get_size(m, "heads", cfg.model.heads, p);
    get_size(m, "expert_hidden", cfg.model.expert_hidden, p);
    get_size(m, "num_experts", cfg.model.num_experts, p);
    get_size(m, "top_k", cfg.model.top_k, p);
    get(m, "lambda_erl", cfg.model.lambda_erl, p);
    get(m, "lambda_balance", cfg.model.lambda_balance, p);
    get(m, "seed", cfg.model.seed, p);
    get_size(m, "max_seq_len", cfg.model.max_seq_len, p);
    get(m, "rollout_temperature", cfg.model.rollout_temperature, p);
    get(m, "router_bias", cfg.model.router_bias, p);
    get(m, "sample_std_advantages", cfg.model.sample_std_advantages, p);
    get(m, "stop_lower_tier_grad", cfg.model.stop_lower_tier_grad, p);
    get(m, "init_std", cfg.model.init_std, p);
    if (m.contains("precision")) {
      const std::string v = m.at("precision").get<std::string>();
      if (v == "f64") cfg.model.precision = Precision::f64;
      else if (v == "f32") cfg.model.precision = Precision::f32;
      else throw config_error(p + "precision: expected f64 or f32, got '" + v + "'");
    }
    if (m.contains("rollout")) {
      const std::string v = m.at("rollout").get<std::string>();
      if (v == "teacher_forced") cfg.model.rollout = RolloutMode::teacher_forced;
      else if (v == "sampled") cfg.model.rollout = RolloutMode::sampled;
      else throw config_error(p + "rollout: expected teacher_forced or sampled, got '" + v +
                              "'");
    }
    if (m.contains("activation")) {
      const std::string v = m.at("activation").get<std::string>();
      if (v == "silu") cfg.model.act = Activation::silu;
      else if (v == "gelu") cfg.model.act = Activation::gelu;
      else if (v == "relu") cfg.model.act = Activation::relu;
      else throw config_error(p + "activation: expected silu, gelu, or relu, got '" + v +
                              "'");
    }
  } else {
    cfg.model.vocab_size = 0;
    cfg.model.max_seq_len = 0;
  }

  if (root.contains("grouping"))
    cfg.model.grouping = parse_grouping(root.at("grouping"), "grouping.");

  if (root.contains("scope")) {
    const auto& s = root.at("scope");
    const std::string p = "scope.";
    reject_unknown(s, {"kind", "layers"}, p);
    std::string kind = "full";
    get(s, "kind", kind, p);
    if (kind == "full") cfg.model.scope_kind = ScopeKind::full;
    else if (kind == "shallow") cfg.model.scope_kind = ScopeKind::shallow;
    else if (kind == "deep") cfg.model.scope_kind = ScopeKind::deep;
    else if (kind == "even") cfg.model.scope_kind = ScopeKind::even;
    else if (kind == "explicit") cfg.model.scope_kind = ScopeKind::explicit_set;
    else throw config_error(p + "kind: unknown scope kind '" + kind + "'");
    get(s, "layers", cfg.model.scope_layers, p);
  }

  if (root.contains("rewards")) {
    try {
      cfg.model.rewards.rewards = root.at("rewards").get<std::vector<double>>();
    } catch (const json::exception& e) {
      throw config_error(std::string("rewards: ") + e.what());
    }
  }

  if (root.contains("dataset")) {
    const auto& d = root.at("dataset");
    const std::string p = "dataset.";
    reject_unknown(d, {"prompt_len", "data_vocab", "train_size", "eval_size", "seed"}, p);
    get_size(d, "prompt_len", cfg.data.prompt_len, p);
    get_size(d, "data_vocab", cfg.data.data_vocab, p);
    get_size(d, "train_size", cfg.data.train_size, p);
    get_size(d, "eval_size", cfg.data.eval_size, p);
    get(d, "seed", cfg.data.seed, p);
  }

  if (root.contains("train")) {
    const auto& t = root.at("train");
    const std::string p = "train.";
    reject_unknown(t, {"steps", "batch_size", "eval_every", "checkpoint_every", "lr",
                       "beta1", "beta2", "eps", "weight_decay", "warmup_steps",
                       "min_lr_factor", "baseline"},
                   p);
    get_size(t, "steps", cfg.train.steps, p);
    get_size(t, "batch_size", cfg.train.batch_size, p);
    get_size(t, "eval_every", cfg.train.eval_every, p);
    get_size(t, "checkpoint_every", cfg.train.checkpoint_every, p);
    get(t, "lr", cfg.train.opt.lr, p);
    get(t, "beta1", cfg.train.opt.beta1, p);
    get(t, "beta2", cfg.train.opt.beta2, p);
    get(t, "eps", cfg.train.opt.eps, p);
    get(t, "weight_decay", cfg.train.opt.weight_decay, p);
    get_size(t, "warmup_steps", cfg.train.opt.warmup_steps, p);
    get(t, "min_lr_factor", cfg.train.opt.min_lr_factor, p);
    get(t, "baseline", cfg.train.baseline, p);
    if (cfg.train.steps < 1) throw config_error("train.steps: must be >= 1");
    if (cfg.train.batch_size < 1) throw config_error("train.batch_size: must be >= 1");
  }
  cfg.train.opt.total_steps = 0;  // resolved in finalize()

  if (root.contains("ablation")) {
    const auto& a = root.at("ablation");
    const std::string p = "ablation.";
    reject_unknown(a, {"axis", "values"}, p);
    std::string axis;
    get(a, "axis", axis, p);
    if (axis == "group_count") cfg.axis = AblationAxis::group_count;
    else if (axis == "strategy") cfg.axis = AblationAxis::strategy;
    else if (axis == "reward") cfg.axis = AblationAxis::reward;
    else if (axis == "layer_scope") cfg.axis = AblationAxis::layer_scope;
    else if (axis == "group_parity") cfg.axis = AblationAxis::group_parity;
    else throw config_error(p + "axis: unknown ablation axis '" + axis + "'");
    if (!a.contains("values") || !a.at("values").is_array() || a.at("values").empty())
      throw config_error(p + "values: expected a non-empty array");
    cfg.axis_values = a.at("values");
  }

  cfg.finalize();
  return cfg;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw config_error("config: cannot open file: " + path);
  json root;
  try {
    root = json::parse(is);
  } catch (const json::exception& e) {
    throw config_error("config: " + path + ": " + e.what());
  }
  return parse_experiment_json(root);
}

/// Fully resolved configuration, suitable for echoing next to run outputs.
inline json config_to_json(const ExperimentConfig& cfg) {
  const auto& m = cfg.model;
  json g = {{"kind", grouping_kind_name(m.grouping.kind)},
            {"tiers", m.grouping.tiers},
            {"group_size", m.grouping.group_size},
            {"sizes", m.grouping.sizes},
            {"start_ranks", m.grouping.start_ranks},
            {"seed", m.grouping.seed},
            {"random_per_batch", m.grouping.random_per_batch},
            {"mode", grouping_mode_name(m.grouping.mode)},
            {"window", m.grouping.window}};
  json out = {
      {"task", task_name(cfg.task)},
      {"out_dir", cfg.out_dir},
      {"model",
       {{"vocab_size", m.vocab_size},
        {"hidden", m.hidden},
        {"num_layers", m.num_layers},
        {"heads", m.heads},
        {"expert_hidden", m.expert_hidden},
        {"num_experts", m.num_experts},
        {"top_k", m.top_k},
        {"lambda_erl", m.lambda_erl},
        {"lambda_balance", m.lambda_balance},
        {"seed", m.seed},
        {"precision", m.precision == Precision::f64 ? "f64" : "f32"},
        {"max_seq_len", m.max_seq_len},
        {"rollout", m.rollout == RolloutMode::teacher_forced ? "teacher_forced" : "sampled"},
        {"rollout_temperature", m.rollout_temperature},
        {"router_bias", m.router_bias},
        {"activation", activation_name(m.act)},
        {"sample_std_advantages", m.sample_std_advantages},
        {"stop_lower_tier_grad", m.stop_lower_tier_grad},
        {"init_std", m.init_std}}},
      {"grouping", g},
      {"scope", {{"kind", scope_kind_name(m.scope_kind)}, {"layers", m.scope_layers}}},
      {"rewards", m.rewards.rewards},
      {"dataset",
       {{"prompt_len", cfg.data.prompt_len},
        {"data_vocab", cfg.data.data_vocab},
        {"train_size", cfg.data.train_size},
        {"eval_size", cfg.data.eval_size},
        {"seed", cfg.data.seed}}},
      {"train",
       {{"steps", cfg.train.steps},
        {"batch_size", cfg.train.batch_size},
        {"eval_every", cfg.train.eval_every},
        {"checkpoint_every", cfg.train.checkpoint_every},
        {"lr", cfg.train.opt.lr},
        {"beta1", cfg.train.opt.beta1},
        {"beta2", cfg.train.opt.beta2},
        {"eps", cfg.train.opt.eps},
        {"weight_decay", cfg.train.opt.weight_decay},
        {"warmup_steps", cfg.train.opt.warmup_steps},
        {"min_lr_factor", cfg.train.opt.min_lr_factor},
        {"baseline", cfg.train.baseline}}}};
  if (cfg.axis != AblationAxis::none)
    out["ablation"] = {{"axis", ablation_axis_name(cfg.axis)}, {"values", cfg.axis_values}};
  return out;
}

/// Derive the sub-run configuration for one swept value of the given axis.
inline ExperimentConfig apply_ablation_value(const ExperimentConfig& base, AblationAxis axis,
                                             const json& value) {
  ExperimentConfig cfg = base;
  cfg.axis = AblationAxis::none;
  cfg.axis_values = json::array();
  const std::size_t n = cfg.model.num_experts;
  const std::size_t k = cfg.model.top_k;
  switch (axis) {
    case AblationAxis::none:
      throw config_error("ablation: no axis configured");
    case AblationAxis::group_count: {
      if (!value.is_number_integer() && !value.is_number_unsigned())
        throw config_error("ablation.values: group_count entries must be integers");
      cfg.model.grouping.tiers = value.get<std::size_t>();
      cfg.model.grouping.sizes.clear();
      cfg.model.grouping.start_ranks.clear();
      cfg.model.rewards.rewards = ExperimentConfig::default_rewards(cfg.model.grouping.tiers);
      break;
    }
    case AblationAxis::strategy: {
      const std::string v = value.get<std::string>();
      if (v == "uniform") cfg.model.grouping.kind = GroupingKind::uniform;
      else if (v == "high_only") cfg.model.grouping.kind = GroupingKind::high_only;
      else if (v == "random") cfg.model.grouping.kind = GroupingKind::random;
      else throw config_error("ablation.values: unknown strategy '" + v + "'");
      cfg.model.grouping.sizes.clear();
      cfg.model.grouping.start_ranks.clear();
      break;
    }
    case AblationAxis::reward:
      cfg.model.rewards.rewards = value.get<std::vector<double>>();
      break;
    case AblationAxis::layer_scope: {
      const std::string v = value.get<std::string>();
      if (v == "full") cfg.model.scope_kind = ScopeKind::full;
      else if (v == "shallow") cfg.model.scope_kind = ScopeKind::shallow;
      else if (v == "deep") cfg.model.scope_kind = ScopeKind::deep;
      else if (v == "even") cfg.model.scope_kind = ScopeKind::even;
      else throw config_error("ablation.values: unknown layer scope '" + v + "'");
      break;
    }
    case AblationAxis::group_parity: {
      const std::string v = value.get<std::string>();
      if (v == "even") {
        cfg.model.grouping.kind = GroupingKind::uniform;
        cfg.model.grouping.sizes.clear();
        cfg.model.grouping.start_ranks.clear();
      } else if (v == "uneven") {
        // Double-size top tier, half-size lower tiers, at the uniform
        // block anchors; expressible explicitly via grouping.sizes too.
        cfg.model.grouping.kind = GroupingKind::uneven;
        const auto starts = default_block_positions(n, k, cfg.model.grouping.tiers);
        cfg.model.grouping.start_ranks = starts;
        cfg.model.grouping.sizes.assign(cfg.model.grouping.tiers,
                                        std::max<std::size_t>(k / 2, 1));
        cfg.model.grouping.sizes[0] = k;
      } else {
        throw config_error("ablation.values: unknown group parity '" + v + "'");
      }
      break;
    }
  }
  try {
    cfg.model.validate();
  } catch (const std::exception& e) {
    throw config_error(std::string("ablation sub-run: ") + e.what());
  }
  return cfg;
}

}  // namespace ordmoe
