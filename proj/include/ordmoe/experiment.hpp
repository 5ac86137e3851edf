#pragma once

#include <algorithm>
#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ordmoe/checkpoint.hpp"
#include "ordmoe/config.hpp"
#include "ordmoe/dataset.hpp"
#include "ordmoe/gradcheck.hpp"
#include "ordmoe/metrics.hpp"
#include "ordmoe/model.hpp"
#include "ordmoe/training.hpp"

namespace ordmoe {

inline constexpr const char* kOutRootEnv = "ORDMOE_OUT_ROOT";

/// Apply the output-root environment override to relative output paths.
inline std::string resolve_out_dir(const std::string& out_dir) {
  const char* root = std::getenv(kOutRootEnv);
  if (!root || !*root) return out_dir;
  std::filesystem::path p(out_dir);
  if (p.is_absolute()) return out_dir;
  return (std::filesystem::path(root) / p).string();
}

struct RunSummary {
  std::string dir;
  std::size_t steps_done = 0;
  EvalResult final_eval;
  bool aborted = false;
  std::string abort_message;
};

inline json summary_to_json(const RunSummary& s, const ExperimentConfig& cfg) {
  json j = {{"dir", s.dir},
            {"steps_done", s.steps_done},
            {"aborted", s.aborted},
            {"task", task_name(cfg.task)},
            {"tiers", cfg.model.grouping.tiers},
            {"strategy", grouping_kind_name(cfg.model.grouping.kind)}};
  if (s.aborted) {
    j["error"] = s.abort_message;
    return j;
  }
  j["final"] = {{"tier_avg", s.final_eval.tier_avg},
                {"separation", s.final_eval.separation},
                {"ordinal_consistency", s.final_eval.ordinal_consistency},
                {"accuracy", s.final_eval.token_accuracy},
                {"balance", s.final_eval.balance},
                {"ntp", s.final_eval.ntp},
                {"load_entropy", s.final_eval.load_entropy}};
  return j;
}

/// Train one configuration end to end, leaving resolved_config.json,
/// dataset files, metrics.jsonl, checkpoints, and summary.json in the
/// output directory. Throws numeric_error on training abort after
/// persisting partial metrics and an aborted summary.
template <class Real = double>
RunSummary run_experiment(const ExperimentConfig& cfg, std::ostream& log) {
  namespace fs = std::filesystem;
  const std::string dir = resolve_out_dir(cfg.out_dir);
  fs::create_directories(dir);

  {
    std::ofstream os(dir + "/resolved_config.json");
    os << config_to_json(cfg).dump(2) << '\n';
  }

  Dataset ds = generate_dataset(cfg.data);
  write_sequences(dir + "/train.txt", ds, ds.train);
  write_sequences(dir + "/eval.txt", ds, ds.eval);

  auto st = TrainState<Real>::init(cfg.model);
  st.plain_baseline = cfg.train.baseline;
  MetricsWriter metrics(dir + "/metrics.jsonl");
  const std::uint64_t eval_salt = derive_seed(cfg.model.seed, salt::eval);

  RunSummary summary;
  summary.dir = dir;
  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed_ms = [&t0] {
    return std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0)
        .count();
  };

  auto record_eval = [&](std::size_t step, const LossBreakdown<Real>& loss) {
    EvalResult ev = evaluate(st.params, ds.eval, cfg.data.prompt_len, cfg.train.batch_size,
                             eval_salt, &st.static_means);
    MetricsRecord r;
    r.step = step;
    r.ntp = loss.ntp.item();
    r.erl = loss.erl.item();
    r.balance = loss.balance.item();
    r.total = loss.total.item();
    r.tier_avg = ev.tier_avg;
    r.separation = ev.separation;
    r.ordinal_consistency = ev.ordinal_consistency;
    r.accuracy = ev.token_accuracy;
    r.load_entropy = ev.load_entropy;
    r.lr = cfg.train.opt.lr_at(step);
    r.wall_ms = elapsed_ms();
    metrics.write(r);
    log << "step " << std::setw(6) << step << "  total " << std::setw(10) << r.total
        << "  ntp " << std::setw(10) << r.ntp << "  S " << std::setw(9) << r.separation
        << "  consist " << r.ordinal_consistency << "  acc " << r.accuracy << '\n';
    summary.final_eval = ev;
    return ev;
  };

  try {
    for (std::size_t i = 1; i <= cfg.train.steps; ++i) {
      Batch batch = sample_batch(st, ds.train, cfg.data.prompt_len, cfg.train.batch_size);
      LossBreakdown<Real> loss = train_step(st, batch, cfg.train.opt);
      summary.steps_done = st.step;
      const bool at_eval = cfg.train.eval_every > 0 && i % cfg.train.eval_every == 0;
      if (at_eval || i == cfg.train.steps) record_eval(st.step, loss);
      if (cfg.train.checkpoint_every > 0 && i % cfg.train.checkpoint_every == 0)
        save_checkpoint(dir + "/checkpoint_latest.bin", st);
    }
  } catch (const numeric_error& e) {
    summary.aborted = true;
    summary.abort_message = e.what();
    std::ofstream os(dir + "/summary.json");
    os << summary_to_json(summary, cfg).dump(2) << '\n';
    throw;
  }

  save_checkpoint(dir + "/checkpoint_final.bin", st);
  {
    std::ofstream os(dir + "/summary.json");
    os << summary_to_json(summary, cfg).dump(2) << '\n';
  }
  return summary;
}

inline std::string ablation_value_label(const json& v) {
  std::string raw;
  if (v.is_string()) {
    raw = v.get<std::string>();
  } else if (v.is_array()) {
    for (const auto& e : v) {
      if (!raw.empty()) raw += '-';
      raw += e.dump();
    }
  } else {
    raw = v.dump();
  }
  for (char& c : raw)
    if (c == '"' || c == '/' || c == ' ') c = '_';
  return raw;
}

/// One sub-run per swept value, each in its own subdirectory, followed by a
/// single comparative summary across the axis.
template <class Real = double>
std::vector<RunSummary> run_ablation(const ExperimentConfig& base, std::ostream& log) {
  const std::string dir = resolve_out_dir(base.out_dir);
  std::filesystem::create_directories(dir);
  {
    std::ofstream os(dir + "/resolved_config.json");
    os << config_to_json(base).dump(2) << '\n';
  }
  std::vector<RunSummary> all;
  json rows = json::array();
  for (const auto& value : base.axis_values) {
    ExperimentConfig sub = apply_ablation_value(base, base.axis, value);
    const std::string label =
        std::string(ablation_axis_name(base.axis)) + "=" + ablation_value_label(value);
    sub.out_dir = base.out_dir + "/" + label;
    log << "--- " << label << " ---\n";
    RunSummary s = run_experiment<Real>(sub, log);
    json row = summary_to_json(s, sub);
    row["value"] = value;
    rows.push_back(row);
    all.push_back(std::move(s));
  }
  json comparative = {{"axis", ablation_axis_name(base.axis)}, {"runs", rows}};
  std::ofstream os(dir + "/ablation_summary.json");
  os << comparative.dump(2) << '\n';
  log << "ablation summary: " << dir << "/ablation_summary.json\n";
  return all;
}

inline std::string format_metrics_table(const std::vector<MetricsRecord>& records) {
  std::ostringstream os;
  os << std::setw(7) << "step" << std::setw(11) << "total" << std::setw(11) << "ntp"
     << std::setw(11) << "erl" << std::setw(11) << "balance" << std::setw(10) << "S"
     << std::setw(9) << "consist" << std::setw(8) << "acc" << std::setw(9) << "loadH"
     << '\n';
  os << std::fixed << std::setprecision(4);
  for (const auto& r : records)
    os << std::setw(7) << r.step << std::setw(11) << r.total << std::setw(11) << r.ntp
       << std::setw(11) << r.erl << std::setw(11) << r.balance << std::setw(10)
       << r.separation << std::setw(9) << r.ordinal_consistency << std::setw(8)
       << r.accuracy << std::setw(9) << r.load_entropy << '\n';
  return os.str();
}

// ---------------------------------------------------------------------------
// verification battery
// ---------------------------------------------------------------------------

struct VerifyCheck {
  std::string module;
  std::string name;
  bool pass = false;
  std::string observed;
};

struct VerifyReport {
  std::vector<VerifyCheck> checks;

  std::size_t passed() const {
    std::size_t c = 0;
    for (const auto& v : checks) c += v.pass;
    return c;
  }
  std::size_t failed() const { return checks.size() - passed(); }
  bool all_pass() const { return failed() == 0; }

  std::string to_string() const {
    std::ostringstream os;
    for (const auto& c : checks)
      os << (c.pass ? "  ok   " : "  FAIL ") << std::left << std::setw(12) << c.module
         << std::setw(34) << c.name << std::right << c.observed << '\n';
    os << passed() << " passed, " << failed() << " failed\n";
    return os.str();
  }
};

/// The gradient-check matrix: tier counts 1..3, uniform and random
/// grouping, full and shallow layer scopes, on a 2-layer 8-expert model
/// with hidden width 16.
inline std::vector<ModelConfig> gradcheck_matrix() {
  std::vector<ModelConfig> out;
  std::uint64_t seed = 100;
  for (std::size_t tiers : {1u, 2u, 3u}) {
    for (GroupingKind kind : {GroupingKind::uniform, GroupingKind::random}) {
      for (ScopeKind scope : {ScopeKind::full, ScopeKind::shallow}) {
        ModelConfig m;
        m.vocab_size = 9;
        m.hidden = 16;
        m.num_layers = 2;
        m.heads = 2;
        m.expert_hidden = 8;
        m.num_experts = 8;
        m.top_k = 2;
        m.max_seq_len = 8;
        m.grouping.tiers = tiers;
        m.grouping.kind = kind;
        m.scope_kind = scope;
        m.rewards.rewards = ExperimentConfig::default_rewards(tiers);
        m.seed = seed++;
        m.validate();
        out.push_back(m);
      }
    }
  }
  return out;
}

inline std::string describe_model_config(const ModelConfig& m) {
  std::ostringstream os;
  os << "C=" << m.grouping.tiers << " " << grouping_kind_name(m.grouping.kind) << " "
     << scope_kind_name(m.scope_kind);
  return os.str();
}

/// Finite-difference check of the full training objective for one model
/// configuration on a small fixed batch.
template <class Real>
GradCheckReport run_model_gradcheck(const ModelConfig& cfg, std::size_t max_coords_per_param,
                                    double rel_tol = 1e-4, Real epsilon = Real(1e-5)) {
  DatasetConfig dc;
  dc.task = Task::copy;
  dc.prompt_len = 3;
  dc.data_vocab = cfg.vocab_size - 1;
  dc.train_size = 4;
  dc.eval_size = 2;
  dc.seed = 7 + cfg.seed;
  Dataset ds = generate_dataset(dc);

  Batch batch;
  batch.prompt_len = dc.prompt_len;
  batch.seqs = {ds.train[0], ds.train[1]};

  auto st = TrainState<Real>::init(cfg);
  const std::uint64_t step_salt = st.grouping_salt();
  auto loss_fn = [&]() {
    return build_objective(batch, st.params, step_salt, &st.static_means,
                           /*update_static=*/false, nullptr)
        .loss.total;
  };
  return finite_diff_check<Real>(st.params.trainable(), loss_fn, epsilon, rel_tol,
                                 /*denom_floor=*/1e-4, /*max_failures=*/8,
                                 max_coords_per_param);
}

inline VerifyReport verify_gradcheck(std::size_t max_coords_per_param, std::ostream& log) {
  VerifyReport report;
  for (const ModelConfig& m : gradcheck_matrix()) {
    GradCheckReport r = run_model_gradcheck<double>(m, max_coords_per_param);
    VerifyCheck c;
    c.module = "gradcheck";
    c.name = describe_model_config(m);
    c.pass = r.pass;
    c.observed = r.to_string();
    log << (c.pass ? "  ok   " : "  FAIL ") << c.name << ": " << c.observed << '\n';
    report.checks.push_back(std::move(c));
  }
  log << report.passed() << " passed, " << report.failed() << " failed\n";
  return report;
}

namespace verifydetail {

inline std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

template <class Fn>
void add_check(VerifyReport& rep, const std::string& module, const std::string& name,
               Fn&& fn) {
  VerifyCheck c;
  c.module = module;
  c.name = name;
  try {
    fn(c);
  } catch (const std::exception& e) {
    c.pass = false;
    c.observed = std::string("exception: ") + e.what();
  }
  rep.checks.push_back(std::move(c));
}

}  // namespace verifydetail

/// Property battery over every module, reported one line per invariant.
inline VerifyReport verify_invariants(std::ostream& log) {
  using verifydetail::add_check;
  using verifydetail::fmt;
  using Real = double;
  VerifyReport rep;

  add_check(rep, "rng", "same seed, same stream; state round-trip", [](VerifyCheck& c) {
    Rng a(42), b(42);
    bool same = true;
    for (int i = 0; i < 64; ++i) same = same && a.next_u64() == b.next_u64();
    a.gaussian();  // leave a cached spare in flight
    auto snap = a.state();
    std::vector<double> expect;
    for (int i = 0; i < 9; ++i) expect.push_back(a.gaussian());
    Rng c2(1);
    c2.restore(snap);
    bool rt = true;
    for (int i = 0; i < 9; ++i) rt = rt && c2.gaussian() == expect[i];
    c.pass = same && rt;
    c.observed = same ? (rt ? "64 draws equal, 9 gaussians replayed" : "state mismatch")
                      : "stream mismatch";
  });

  add_check(rep, "autodiff", "masked softmax: support sums, off-mask zero",
            [](VerifyCheck& c) {
              auto logits = Tensor<Real>::from({3}, {2.0, 1.0, 0.0});
              auto p = masked_softmax(logits, {0, 1});
              const double sum = p.value()[0] + p.value()[1];
              c.pass = std::abs(sum - 1.0) < 1e-15 && p.value()[2] == 0.0 &&
                       std::abs(p.value()[0] - 0.7310585786300049) < 1e-15;
              c.observed = "sum-1 = " + fmt(sum - 1.0);
            });

  add_check(rep, "moe", "restricted gates: sum 1 per tier, exact 0 off-tier",
            [](VerifyCheck& c) {
              Rng rng(5);
              const std::size_t d = 6, n = 8, k = 2, tiers = 3;
              GroupingStrategy strat;
              strat.tiers = tiers;
              strat.group_size = k;
              strat = resolve_strategy(strat, n);
              RouterParams<Real> router{Tensor<Real>::zeros({d, n}),
                                        Tensor<Real>::zeros({n})};
              for (auto& w : router.weight.value()) w = rng.gaussian() * 0.5;
              double worst_sum = 0.0, worst_off = 0.0;
              for (int trial = 0; trial < 500; ++trial) {
                auto x = Tensor<Real>::zeros({d});
                for (auto& v : x.value()) v = rng.gaussian();
                auto state = route(x, router);
                auto groups = assign_groups(state.ranking, strat, 0);
                for (std::size_t j = 0; j < tiers; ++j) {
                  auto g = gate_weights(state, groups.groups[j]);
                  double sum = 0.0;
                  std::vector<bool> in(n, false);
                  for (int e : groups.groups[j]) in[static_cast<std::size_t>(e)] = true;
                  for (std::size_t e = 0; e < n; ++e) {
                    if (in[e]) sum += g.value()[e];
                    else worst_off = std::max(worst_off, std::abs(g.value()[e]));
                  }
                  worst_sum = std::max(worst_sum, std::abs(sum - 1.0));
                }
              }
              c.pass = worst_sum < 1e-12 && worst_off == 0.0;
              c.observed = "max |sum-1| = " + fmt(worst_sum) +
                           ", max off-tier = " + fmt(worst_off);
            });

  add_check(rep, "moe", "tier-1 forward bitwise equals plain top-k", [](VerifyCheck& c) {
    Rng rng(9);
    const std::size_t d = 6, n = 8, k = 2;
    MoeLayer<Real> layer;
    layer.top_k = k;
    layer.router = {Tensor<Real>::zeros({d, n}), Tensor<Real>::zeros({n})};
    for (auto& w : layer.router.weight.value()) w = rng.gaussian() * 0.5;
    for (std::size_t e = 0; e < n; ++e)
      layer.experts.push_back({Tensor<Real>::zeros({d, 4}), Tensor<Real>::zeros({4, d})});
    for (auto& ex : layer.experts) {
      for (auto& w : ex.w1.value()) w = rng.gaussian() * 0.3;
      for (auto& w : ex.w2.value()) w = rng.gaussian() * 0.3;
    }
    GroupingStrategy strat;
    strat.tiers = 3;
    strat.group_size = k;
    strat = resolve_strategy(strat, n);
    bool equal = true;
    for (int trial = 0; trial < 200 && equal; ++trial) {
      auto x = Tensor<Real>::zeros({d});
      for (auto& v : x.value()) v = rng.gaussian();
      auto state = route(x, layer.router);
      auto groups = assign_groups(state.ranking, strat, 0);
      auto plain_sel = top_k_select(state, k);
      auto y_plain = moe_forward(x, gate_weights(state, plain_sel), layer);
      auto y_tier1 = tier_restricted_forward(x, groups.groups[0], state, layer);
      for (std::size_t i = 0; i < d; ++i)
        if (y_plain.value()[i] != y_tier1.value()[i]) equal = false;
    }
    c.pass = equal;
    c.observed = equal ? "200 tokens bitwise equal" : "mismatch";
  });

  add_check(rep, "grouping", "block anchors match published recipes", [](VerifyCheck& c) {
    const auto a = default_block_positions(64, 6, 3);
    const auto b = default_block_positions(256, 8, 3);
    const auto t = default_block_positions(16, 2, 3);
    c.pass = a == std::vector<std::size_t>{1, 25, 59} &&
             b == std::vector<std::size_t>{1, 121, 249} &&
             t == std::vector<std::size_t>{1, 7, 15};
    std::ostringstream os;
    os << "(64,6,3) starts " << a[0] << "," << a[1] << "," << a[2] << "; (256,8,3) starts "
       << b[0] << "," << b[1] << "," << b[2];
    c.observed = os.str();
  });

  add_check(rep, "grouping", "tiers are disjoint rank blocks", [](VerifyCheck& c) {
    Rng rng(17);
    bool ok = true;
    for (GroupingKind kind :
         {GroupingKind::uniform, GroupingKind::high_only, GroupingKind::random}) {
      GroupingStrategy strat;
      strat.kind = kind;
      strat.tiers = 3;
      strat.group_size = 2;
      strat = resolve_strategy(strat, 8);
      for (int trial = 0; trial < 100; ++trial) {
        std::vector<Real> scores(8);
        for (auto& s : scores) s = rng.gaussian();
        auto ranking = rank_by_score(scores.data(), 8);
        auto groups = assign_groups(ranking, strat, rng.next_u64());
        std::vector<int> seen;
        for (const auto& g : groups.groups) {
          if (g.size() != 2) ok = false;
          for (int e : g) {
            if (e < 0 || e >= 8) ok = false;
            seen.push_back(e);
          }
        }
        std::sort(seen.begin(), seen.end());
        if (std::adjacent_find(seen.begin(), seen.end()) != seen.end()) ok = false;
      }
    }
    c.pass = ok;
    c.observed = ok ? "3 kinds x 100 rankings partitioned" : "overlap or size violation";
  });

  add_check(rep, "losses", "advantages: mean 0, population std 1, affine invariant",
            [](VerifyCheck& c) {
              const std::vector<std::vector<double>> schedules = {
                  {1.0, 0.5, 0.0}, {2.0, 1.0, 0.0}, {0.5, 0.25, 0.0}};
              double worst_mean = 0.0, worst_std = 0.0, worst_gap = 0.0;
              std::vector<double> first;
              for (const auto& s : schedules) {
                auto adv = compute_advantages<Real>({s});
                double mean = 0.0;
                for (double v : adv.value()) mean += v;
                mean /= 3.0;
                double var = 0.0;
                for (double v : adv.value()) var += (v - mean) * (v - mean);
                var /= 3.0;
                worst_mean = std::max(worst_mean, std::abs(mean));
                worst_std = std::max(worst_std, std::abs(std::sqrt(var) - 1.0));
                if (first.empty())
                  first = adv.value();
                else
                  for (std::size_t i = 0; i < 3; ++i)
                    worst_gap = std::max(worst_gap, std::abs(adv.value()[i] - first[i]));
              }
              c.pass = worst_mean < 1e-12 && worst_std < 1e-10 && worst_gap < 1e-12;
              c.observed = "|mean| " + fmt(worst_mean) + ", |std-1| " + fmt(worst_std) +
                           ", schedule gap " + fmt(worst_gap);
            });

  add_check(rep, "losses", "balance: uniform gives K/n, collapse is larger",
            [](VerifyCheck& c) {
              const std::size_t n = 4, k = 2, tokens = 6;
              auto uniform_probs = Tensor<Real>::filled({tokens, n}, 0.25);
              auto peaked = Tensor<Real>::zeros({tokens, n});
              for (std::size_t t = 0; t < tokens; ++t) {
                peaked.value()[t * n + 0] = 0.45;
                peaked.value()[t * n + 1] = 0.45;
                peaked.value()[t * n + 2] = 0.05;
                peaked.value()[t * n + 3] = 0.05;
              }
              std::vector<std::vector<int>> spread_sets, collapsed_sets;
              for (std::size_t t = 0; t < tokens; ++t) {
                spread_sets.push_back(
                    {static_cast<int>((2 * t) % n), static_cast<int>((2 * t + 1) % n)});
                collapsed_sets.push_back({0, 1});
              }
              auto lu = balance_loss(uniform_probs, spread_sets);
              auto lc = balance_loss(peaked, collapsed_sets);
              c.pass = lu.item() == static_cast<double>(k) / static_cast<double>(n) &&
                       lc.item() > lu.item();
              c.observed = "uniform " + fmt(lu.item()) + ", collapsed " + fmt(lc.item());
            });

  add_check(rep, "losses", "rank loss on the worked three-tier example",
            [](VerifyCheck& c) {
              auto lbar = Tensor<Real>::from({3}, {-0.1, -1.1, -2.1});
              auto adv = compute_advantages<Real>({{1.0, 0.5, 0.0}});
              auto loss = erl_loss(lbar, adv);
              c.pass = std::abs(loss.item() - (-2.449489742783178)) < 1e-12;
              c.observed = "erl = " + fmt(loss.item());
            });

  add_check(rep, "model", "single tier reduces to the plain objective",
            [](VerifyCheck& c) {
              ModelConfig m;
              m.vocab_size = 9;
              m.hidden = 16;
              m.num_layers = 2;
              m.heads = 2;
              m.expert_hidden = 8;
              m.num_experts = 8;
              m.top_k = 2;
              m.max_seq_len = 8;
              m.grouping.tiers = 1;
              m.rewards.rewards = {1.0};
              m.seed = 3;
              m.validate();
              DatasetConfig dc;
              dc.prompt_len = 3;
              dc.data_vocab = 8;
              dc.train_size = 4;
              dc.eval_size = 2;
              Dataset ds = generate_dataset(dc);
              Batch batch;
              batch.prompt_len = dc.prompt_len;
              batch.seqs = {ds.train[0], ds.train[1]};
              auto st = TrainState<Real>::init(m);
              auto tiered = build_objective(batch, st.params, 0, &st.static_means, false);
              auto plain = build_plain_objective(batch, st.params);
              const double gap =
                  std::abs(tiered.loss.total.item() - plain.loss.total.item());
              c.pass = gap == 0.0 && tiered.loss.erl.item() == 0.0;
              c.observed = "total gap " + fmt(gap);
            });

  add_check(rep, "training", "same-seed training is bitwise deterministic",
            [](VerifyCheck& c) {
              ModelConfig m;
              m.vocab_size = 9;
              m.hidden = 16;
              m.num_layers = 2;
              m.heads = 2;
              m.expert_hidden = 8;
              m.num_experts = 8;
              m.top_k = 2;
              m.max_seq_len = 8;
              m.grouping.tiers = 3;
              m.rewards.rewards = {1.0, 0.5, 0.0};
              m.seed = 11;
              m.validate();
              DatasetConfig dc;
              dc.prompt_len = 3;
              dc.data_vocab = 8;
              dc.train_size = 8;
              dc.eval_size = 2;
              Dataset ds = generate_dataset(dc);
              OptimizerConfig opt;
              opt.total_steps = 5;
              auto run = [&] {
                auto st = TrainState<Real>::init(m);
                std::vector<double> losses;
                for (int i = 0; i < 5; ++i) {
                  Batch b = sample_batch(st, ds.train, dc.prompt_len, 2);
                  losses.push_back(train_step(st, b, opt).total.item());
                }
                return losses;
              };
              const auto a = run(), b = run();
              c.pass = a == b;
              c.observed = c.pass ? "5 steps bit-equal" : "loss streams diverge";
            });

  add_check(rep, "dataset", "splits disjoint; modadd targets recompute",
            [](VerifyCheck& c) {
              DatasetConfig dc;
              dc.task = Task::modadd;
              dc.prompt_len = 4;
              dc.data_vocab = 8;
              dc.train_size = 32;
              dc.eval_size = 16;
              dc.seed = 21;
              Dataset ds = generate_dataset(dc);
              bool ok = ds.train.size() == 32 && ds.eval.size() == 16;
              std::set<std::vector<int>> seen(ds.train.begin(), ds.train.end());
              for (const auto& s : ds.eval) ok = ok && !seen.count(s);
              for (const auto& split : {ds.train, ds.eval})
                for (const auto& s : split) {
                  int sum = 0;
                  for (std::size_t i = 0; i < dc.prompt_len; ++i) sum += s[i];
                  ok = ok && s[dc.prompt_len] == static_cast<int>(dc.data_vocab) &&
                       s.back() == sum % static_cast<int>(dc.data_vocab);
                }
              c.pass = ok;
              c.observed = ok ? "48 sequences verified" : "violation";
            });

  add_check(rep, "config", "unknown keys and C*K > n rejected", [](VerifyCheck& c) {
    bool unknown_caught = false, capacity_caught = false;
    std::string msg1, msg2;
    try {
      parse_experiment_json(json{{"train", {{"batch_sz", 4}}}});
    } catch (const config_error& e) {
      unknown_caught = std::string(e.what()).find("train.batch_sz") != std::string::npos;
      msg1 = e.what();
    }
    try {
      parse_experiment_json(json{{"grouping", {{"tiers", 9}}}});
    } catch (const config_error& e) {
      capacity_caught = true;
      msg2 = e.what();
    }
    c.pass = unknown_caught && capacity_caught;
    c.observed = "\"" + msg1 + "\"; \"" + msg2 + "\"";
  });

  add_check(rep, "metrics", "records round-trip through the line format",
            [](VerifyCheck& c) {
              MetricsRecord r;
              r.step = 250;
              r.ntp = 1.25;
              r.erl = -0.5;
              r.balance = 0.51;
              r.total = 1.26;
              r.tier_avg = {-0.8, -1.5, -2.2};
              r.separation = 1.4;
              r.ordinal_consistency = 1.0;
              r.accuracy = 0.97;
              r.load_entropy = 0.93;
              r.lr = 3e-4;
              r.wall_ms = 123.0;
              auto back = MetricsRecord::from_json(json::parse(r.to_json().dump()));
              c.pass = back.same_values(r) && back.wall_ms == r.wall_ms;
              c.observed = c.pass ? "round-trip exact" : "mismatch";
            });

  for (const auto& c : rep.checks)
    log << (c.pass ? "  ok   " : "  FAIL ") << std::left << std::setw(10) << c.module
        << std::setw(44) << c.name << std::right << c.observed << '\n';
  log << rep.passed() << " passed, " << rep.failed() << " failed\n";
  return rep;
}

}  // namespace ordmoe
