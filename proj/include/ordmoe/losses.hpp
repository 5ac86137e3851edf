#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ordmoe/autodiff.hpp"
#include "ordmoe/common.hpp"

namespace ordmoe {

/// Fixed per-tier rewards, strictly decreasing from the most preferred tier.
struct RewardSchedule {
  std::vector<double> rewards;

  std::size_t tiers() const { return rewards.size(); }

  void validate() const {
    if (rewards.empty()) throw std::invalid_argument("reward schedule: empty");
    for (std::size_t j = 1; j < rewards.size(); ++j)
      if (!(rewards[j - 1] > rewards[j]))
        throw std::invalid_argument("reward schedule: rewards must be strictly decreasing, "
                                    "violated at tier " + std::to_string(j + 1));
  }
};

/// Teacher-forced scoring of one tier's forward path.
template <class Real>
struct TierForwardResult {
  Tensor<Real> token_logprobs;  // [response positions], graph
  Tensor<Real> avg_logprob;     // scalar, graph
};

/// The three objective terms and their weighted sum, all live graph nodes.
template <class Real>
struct LossBreakdown {
  Tensor<Real> ntp;
  Tensor<Real> erl;
  Tensor<Real> balance;
  Tensor<Real> total;
  Tensor<Real> advantages;  // [C] constants; empty when the rank loss is off
  double lambda_erl = 1.0;
  double lambda_balance = 1.0;
};

/// Mean log-probability over the positions marked in `response_mask`.
template <class Real>
Tensor<Real> avg_token_logprob(const Tensor<Real>& token_logprobs,
                               const std::vector<std::uint8_t>& response_mask) {
  return mean_masked(token_logprobs, response_mask);
}

/// z-scored rewards: subtract the mean, divide by the standard deviation
/// (population by default, sample with `sample_std`). Constants by design;
/// no gradient flows through the normalization.
template <class Real>
Tensor<Real> compute_advantages(const RewardSchedule& schedule, bool sample_std = false) {
  const std::size_t c = schedule.tiers();
  if (c < 2)
    throw std::invalid_argument("compute_advantages: need at least 2 tiers, got " +
                                std::to_string(c));
  double mu = 0;
  for (double r : schedule.rewards) mu += r;
  mu /= static_cast<double>(c);
  double var = 0;
  for (double r : schedule.rewards) var += (r - mu) * (r - mu);
  var /= static_cast<double>(sample_std ? c - 1 : c);
  if (var <= 0)
    throw numeric_error("compute_advantages: degenerate reward schedule (zero variance)");
  const double sd = std::sqrt(var);
  std::vector<Real> adv(c);
  for (std::size_t j = 0; j < c; ++j)
    adv[j] = static_cast<Real>((schedule.rewards[j] - mu) / sd);
  return Tensor<Real>::from({c}, std::move(adv), false);
}

/// Rank loss: minus the advantage-weighted sum of per-tier average
/// log-probabilities. Gradients reach every tier's forward path.
template <class Real>
Tensor<Real> erl_loss(const Tensor<Real>& avg_logprobs, const Tensor<Real>& advantages) {
  if (avg_logprobs.shape() != advantages.shape())
    throw std::invalid_argument("erl_loss: got " + std::to_string(avg_logprobs.numel()) +
                                " tier log-probs but " + std::to_string(advantages.numel()) +
                                " advantages");
  return neg(dot(avg_logprobs, advantages));
}

/// Mean next-token cross-entropy over the masked positions of [T x V]
/// logits; equals minus the average token log-probability at the targets.
template <class Real>
Tensor<Real> ntp_loss(const Tensor<Real>& logits, const std::vector<int>& targets,
                      const std::vector<std::uint8_t>& response_mask) {
  if (logits.shape().size() != 2) throw shape_error("ntp_loss: expected 2-D logits");
  const std::size_t t = logits.shape()[0];
  if (targets.size() != t || response_mask.size() != t)
    throw std::invalid_argument("ntp_loss: targets and mask must have one entry per row");
  std::vector<std::pair<int, int>> items;
  for (std::size_t i = 0; i < t; ++i)
    if (response_mask[i]) items.emplace_back(static_cast<int>(i), targets[i]);
  if (items.empty()) throw std::invalid_argument("ntp_loss: every position is masked out");
  return neg(mean(gather_log_softmax(logits, items)));
}

/// Load-balance penalty: dot(p, f) with p the mean full-softmax routing
/// probability per expert (live) and f the fraction of tokens whose
/// top-tier set contains the expert (a constant count).
template <class Real>
Tensor<Real> balance_loss(const Tensor<Real>& full_softmax_rows,
                          const std::vector<std::vector<int>>& tier1_sets) {
  if (full_softmax_rows.shape().size() != 2)
    throw shape_error("balance_loss: expected 2-D probabilities");
  const std::size_t t = full_softmax_rows.shape()[0];
  const std::size_t n = full_softmax_rows.shape()[1];
  if (t == 0 || tier1_sets.empty())
    throw std::invalid_argument("balance_loss: no tokens");
  if (tier1_sets.size() != t)
    throw std::invalid_argument("balance_loss: need one assignment set per token");
  std::vector<Real> f(n, Real(0));
  for (const auto& set : tier1_sets)
    for (int e : set) {
      if (e < 0 || static_cast<std::size_t>(e) >= n)
        throw std::invalid_argument("balance_loss: expert " + std::to_string(e) +
                                    " out of range");
      f[static_cast<std::size_t>(e)] += Real(1);
    }
  for (auto& v : f) v /= static_cast<Real>(t);
  auto p = col_mean(full_softmax_rows);
  return dot(p, Tensor<Real>::from({n}, std::move(f), false));
}

/// Weighted sum of the three terms. Each component must be finite; the
/// error names the offender. Callers pass a constant zero for `erl` when
/// the rank loss is inactive (single tier or empty layer scope).
template <class Real>
LossBreakdown<Real> total_loss(const Tensor<Real>& ntp, const Tensor<Real>& erl,
                               const Tensor<Real>& balance, double lambda_erl,
                               double lambda_balance,
                               Tensor<Real> advantages = Tensor<Real>()) {
  auto check = [](const Tensor<Real>& x, const char* name) {
    if (!x.is_scalar())
      throw shape_error(std::string("total_loss: ") + name + " must be scalar");
    if (!std::isfinite(static_cast<double>(x.item())))
      throw numeric_error(std::string("total_loss: non-finite ") + name + " component");
  };
  check(ntp, "ntp");
  check(erl, "erl");
  check(balance, "balance");
  LossBreakdown<Real> out;
  out.ntp = ntp;
  out.erl = erl;
  out.balance = balance;
  out.lambda_erl = lambda_erl;
  out.lambda_balance = lambda_balance;
  out.advantages = std::move(advantages);
  out.total = add(add(ntp, scale(erl, static_cast<Real>(lambda_erl))),
                  scale(balance, static_cast<Real>(lambda_balance)));
  check(out.total, "total");
  return out;
}

}  // namespace ordmoe
