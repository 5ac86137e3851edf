#pragma once

#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <vector>

#include "ordmoe/common.hpp"
#include "ordmoe/model.hpp"
#include "ordmoe/rng.hpp"

namespace ordmoe {

/// AdamW with linear warmup into cosine decay. Weight decay applies to
/// matrices only (embeddings, projections, experts), never to gains or
/// biases.
struct OptimizerConfig {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  std::size_t warmup_steps = 50;
  std::size_t total_steps = 2000;
  double min_lr_factor = 0.1;

  double lr_at(std::size_t step) const {  // step is 1-based
    if (warmup_steps > 0 && step <= warmup_steps)
      return lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
    if (total_steps <= warmup_steps) return lr;
    const double span = static_cast<double>(total_steps - warmup_steps);
    const double done = std::min(static_cast<double>(step - warmup_steps), span);
    const double cosine = 0.5 * (1.0 + std::cos(3.14159265358979323846 * done / span));
    return lr * (min_lr_factor + (1.0 - min_lr_factor) * cosine);
  }
};

namespace salt {
inline constexpr std::uint64_t init = 0x11;
inline constexpr std::uint64_t data = 0x22;
inline constexpr std::uint64_t train = 0x33;
inline constexpr std::uint64_t grouping = 0x44;
inline constexpr std::uint64_t rollout = 0x55;
inline constexpr std::uint64_t eval = 0x66;
inline constexpr std::uint64_t decode = 0x77;
}  // namespace salt

template <class Real>
struct TrainState {
  ModelParams<Real> params;
  std::vector<std::vector<Real>> m;  // aligned with params.named()
  std::vector<std::vector<Real>> v;
  std::size_t step = 0;
  Rng train_rng;
  Rng rollout_rng;
  std::vector<RunningRouterMean<Real>> static_means;  // per layer
  bool plain_baseline = false;  // train the ntp+balance objective only

  static TrainState init(const ModelConfig& cfg) {
    TrainState st;
    st.params = init_model<Real>(cfg, derive_seed(cfg.seed, salt::init));
    const auto named = st.params.named();
    st.m.resize(named.size());
    st.v.resize(named.size());
    for (std::size_t i = 0; i < named.size(); ++i) {
      st.m[i].assign(named[i].second.numel(), Real(0));
      st.v[i].assign(named[i].second.numel(), Real(0));
    }
    st.train_rng.reseed(derive_seed(cfg.seed, salt::train));
    st.rollout_rng.reseed(derive_seed(cfg.seed, salt::rollout));
    st.static_means.assign(cfg.num_layers, RunningRouterMean<Real>{cfg.grouping.window, {}});
    return st;
  }

  std::uint64_t grouping_salt() const {
    return derive_seed(derive_seed(params.config.seed, salt::grouping), step);
  }
};

/// One optimization step: forward, backward, AdamW update. Deterministic
/// given (state, batch). Throws a numeric error naming the loss component
/// and step if the objective degenerates.
template <class Real>
LossBreakdown<Real> train_step(TrainState<Real>& st, const Batch& batch,
                               const OptimizerConfig& opt) {
  const auto named = st.params.named();
  for (const auto& [name, t] : named)
    if (t.requires_grad()) t.zero_grad();

  StepOutputs<Real> out;
  try {
    if (st.plain_baseline)
      out = build_plain_objective(batch, st.params);
    else
      out = build_objective(batch, st.params, st.grouping_salt(), &st.static_means,
                            /*update_static=*/true, &st.rollout_rng);
  } catch (const numeric_error& e) {
    throw numeric_error("step " + std::to_string(st.step) + ": " + e.what());
  }

  backward(out.loss.total);

  ++st.step;
  const double lr = opt.lr_at(st.step);
  const double bc1 = 1.0 - std::pow(opt.beta1, static_cast<double>(st.step));
  const double bc2 = 1.0 - std::pow(opt.beta2, static_cast<double>(st.step));
  for (std::size_t i = 0; i < named.size(); ++i) {
    Tensor<Real> t = named[i].second;
    if (!t.requires_grad() || t.grad().empty()) continue;
    const bool decay = t.shape().size() == 2;
    auto& theta = t.value();
    const auto& g = t.grad();
    auto& mi = st.m[i];
    auto& vi = st.v[i];
    for (std::size_t j = 0; j < theta.size(); ++j) {
      const double gj = static_cast<double>(g[j]);
      const double mj = opt.beta1 * static_cast<double>(mi[j]) + (1.0 - opt.beta1) * gj;
      const double vj =
          opt.beta2 * static_cast<double>(vi[j]) + (1.0 - opt.beta2) * gj * gj;
      mi[j] = static_cast<Real>(mj);
      vi[j] = static_cast<Real>(vj);
      double update = (mj / bc1) / (std::sqrt(vj / bc2) + opt.eps);
      if (decay) update += opt.weight_decay * static_cast<double>(theta[j]);
      theta[j] = static_cast<Real>(static_cast<double>(theta[j]) - lr * update);
    }
  }
  return out.loss;
}

/// Draw a batch of training sequences by index from the state's stream.
template <class Real>
Batch sample_batch(TrainState<Real>& st, const std::vector<std::vector<int>>& train_seqs,
                   std::size_t prompt_len, std::size_t batch_size) {
  Batch b;
  b.prompt_len = prompt_len;
  for (std::size_t i = 0; i < batch_size; ++i)
    b.seqs.push_back(train_seqs[st.train_rng.uniform_below(train_seqs.size())]);
  return b;
}

// ---------------------------------------------------------------------------
// evaluation
// ---------------------------------------------------------------------------

struct EvalResult {
  std::vector<double> tier_avg;    // per-tier mean of batch L-bar values
  double separation = 0;           // mean over batches of L-bar(1) - L-bar(C)
  double ordinal_consistency = 0;  // fraction of batches strictly ordered
  double token_accuracy = 0;       // greedy decode under the top tier
  double balance = 0;
  double ntp = 0;
  double load_entropy = 0;  // pooled over layers, normalized to [0, 1]
  std::vector<std::vector<std::size_t>> load_counts;  // [layer][expert]
  std::size_t batches = 0;
};

/// Held-out metrics: per-tier likelihoods, tier separation and ordering,
/// free-running greedy accuracy, and expert-load statistics.
template <class Real>
EvalResult evaluate(const ModelParams<Real>& params,
                    const std::vector<std::vector<int>>& eval_seqs, std::size_t prompt_len,
                    std::size_t batch_size, std::uint64_t eval_salt,
                    std::vector<RunningRouterMean<Real>>* static_means) {
  if (eval_seqs.empty()) throw std::invalid_argument("evaluate: empty dataset");
  const ModelConfig& cfg = params.config;
  const std::size_t tiers = cfg.grouping.tiers;
  auto view = params.detached_view();

  EvalResult res;
  res.tier_avg.assign(tiers, 0.0);
  res.load_counts.assign(cfg.num_layers, std::vector<std::size_t>(cfg.num_experts, 0));

  for (std::size_t start = 0; start < eval_seqs.size(); start += batch_size) {
    Batch batch;
    batch.prompt_len = prompt_len;
    for (std::size_t i = start; i < std::min(start + batch_size, eval_seqs.size()); ++i)
      batch.seqs.push_back(eval_seqs[i]);
    auto out = build_objective(batch, view, derive_seed(eval_salt, res.batches),
                               static_means, /*update_static=*/false, nullptr,
                               /*force_all_tiers=*/true);
    std::vector<double> lbars;
    for (const auto& t : out.forward.tier_avg) lbars.push_back(t.item());
    for (std::size_t j = 0; j < lbars.size() && j < tiers; ++j) res.tier_avg[j] += lbars[j];
    if (lbars.size() >= 2) {
      res.separation += lbars.front() - lbars.back();
      bool ordered = true;
      for (std::size_t j = 1; j < lbars.size(); ++j)
        if (!(lbars[j - 1] > lbars[j])) ordered = false;
      if (ordered) res.ordinal_consistency += 1.0;
    }
    res.balance += out.forward.balance.item();
    res.ntp += out.loss.ntp.item();
    for (std::size_t l = 0; l < cfg.num_layers; ++l)
      for (std::size_t e = 0; e < cfg.num_experts; ++e)
        res.load_counts[l][e] += out.forward.load_counts[l][e];
    ++res.batches;
  }

  for (auto& v : res.tier_avg) v /= static_cast<double>(res.batches);
  res.separation /= static_cast<double>(res.batches);
  res.ordinal_consistency /= static_cast<double>(res.batches);
  res.balance /= static_cast<double>(res.batches);
  res.ntp /= static_cast<double>(res.batches);

  std::size_t correct = 0, total = 0;
  for (std::size_t i = 0; i < eval_seqs.size(); ++i) {
    const auto& seq = eval_seqs[i];
    std::vector<int> prompt(seq.begin(),
                            seq.begin() + static_cast<std::ptrdiff_t>(prompt_len + 1));
    const std::size_t resp_len = seq.size() - prompt_len - 1;
    auto decoded = decode_tier(prompt, resp_len, 0, view,
                               derive_seed(derive_seed(eval_salt, salt::decode), i));
    for (std::size_t j = 0; j < resp_len; ++j) {
      if (decoded[j] == seq[prompt_len + 1 + j]) ++correct;
      ++total;
    }
  }
  res.token_accuracy = total ? static_cast<double>(correct) / static_cast<double>(total) : 0;

  std::vector<double> pooled(cfg.num_experts, 0.0);
  double grand = 0;
  for (const auto& layer : res.load_counts)
    for (std::size_t e = 0; e < layer.size(); ++e) {
      pooled[e] += static_cast<double>(layer[e]);
      grand += static_cast<double>(layer[e]);
    }
  if (grand > 0 && cfg.num_experts > 1) {
    double h = 0;
    for (double c : pooled)
      if (c > 0) {
        const double q = c / grand;
        h -= q * std::log(q);
      }
    res.load_entropy = h / std::log(static_cast<double>(cfg.num_experts));
  }
  return res;
}

}  // namespace ordmoe
