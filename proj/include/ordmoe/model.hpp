#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include "ordmoe/autodiff.hpp"
#include "ordmoe/common.hpp"
#include "ordmoe/grouping.hpp"
#include "ordmoe/losses.hpp"
#include "ordmoe/moe.hpp"
#include "ordmoe/rng.hpp"

namespace ordmoe {

enum class Precision { f64, f32 };
enum class RolloutMode { teacher_forced, sampled };

/// Full hyperparameter record for the tiny MoE transformer and its
/// tier-restricted training objective.
struct ModelConfig {
  std::size_t vocab_size = 18;
  std::size_t hidden = 64;
  std::size_t num_layers = 2;
  std::size_t heads = 4;
  std::size_t expert_hidden = 32;
  std::size_t num_experts = 16;
  std::size_t top_k = 2;
  GroupingStrategy grouping;
  ScopeKind scope_kind = ScopeKind::full;
  std::vector<std::size_t> scope_layers;  // explicit scope only
  RewardSchedule rewards{{1.0, 0.5, 0.0}};
  double lambda_erl = 1.0;
  double lambda_balance = 1.0;
  std::uint64_t seed = 1;
  Precision precision = Precision::f64;
  std::size_t max_seq_len = 64;
  RolloutMode rollout = RolloutMode::teacher_forced;
  double rollout_temperature = 0.0;
  bool router_bias = true;
  Activation act = Activation::silu;
  bool sample_std_advantages = false;
  bool stop_lower_tier_grad = false;
  double init_std = 0.08;

  GroupingStrategy resolved_grouping() const {
    GroupingStrategy s = grouping;
    if (s.group_size == 0) s.group_size = top_k;
    return resolve_strategy(s, num_experts);
  }

  LayerScope resolved_scope() const {
    return resolve_layer_scope(scope_kind, num_layers, scope_layers);
  }

  bool erl_active() const {
    return grouping.tiers >= 2 && lambda_erl != 0.0 && !resolved_scope().layers.empty();
  }

  void validate() const {
    if (vocab_size < 2) throw std::invalid_argument("model: vocab_size must be >= 2");
    if (hidden == 0 || num_layers == 0 || heads == 0 || expert_hidden == 0 ||
        num_experts == 0 || max_seq_len < 2)
      throw std::invalid_argument("model: all dimensions must be positive");
    if (hidden % heads != 0)
      throw std::invalid_argument("model: hidden " + std::to_string(hidden) +
                                  " not divisible by heads " + std::to_string(heads));
    if (top_k < 1 || top_k > num_experts)
      throw std::invalid_argument("model: top_k " + std::to_string(top_k) +
                                  " outside [1, " + std::to_string(num_experts) + "]");
    resolved_grouping();
    resolved_scope();
    if (grouping.tiers >= 2) {
      rewards.validate();
      if (rewards.tiers() != grouping.tiers)
        throw std::invalid_argument("model: " + std::to_string(rewards.tiers()) +
                                    " rewards for " + std::to_string(grouping.tiers) +
                                    " tiers");
    }
    if (!std::isfinite(lambda_erl) || !std::isfinite(lambda_balance))
      throw std::invalid_argument("model: loss coefficients must be finite");
  }
};

template <class Real>
struct AttentionParams {
  Tensor<Real> wq, wk, wv, wo;  // each [d x d]
};

template <class Real>
struct BlockParams {
  Tensor<Real> attn_gain, moe_gain;  // [d]
  AttentionParams<Real> attn;
  MoeLayer<Real> moe;
};

template <class Real>
struct ModelParams {
  ModelConfig config;
  Tensor<Real> token_embed;  // [V x d]
  Tensor<Real> pos_embed;    // [max_seq_len x d]
  std::vector<BlockParams<Real>> blocks;
  Tensor<Real> final_gain;  // [d]
  Tensor<Real> head;        // [d x V]

  /// Canonical parameter order: drives initialization, the optimizer slot
  /// layout, and the checkpoint layout. Do not reorder.
  std::vector<std::pair<std::string, Tensor<Real>>> named() const {
    std::vector<std::pair<std::string, Tensor<Real>>> out;
    out.emplace_back("token_embed", token_embed);
    out.emplace_back("pos_embed", pos_embed);
    for (std::size_t b = 0; b < blocks.size(); ++b) {
      const auto& blk = blocks[b];
      const std::string p = "block" + std::to_string(b) + ".";
      out.emplace_back(p + "attn_gain", blk.attn_gain);
      out.emplace_back(p + "attn.wq", blk.attn.wq);
      out.emplace_back(p + "attn.wk", blk.attn.wk);
      out.emplace_back(p + "attn.wv", blk.attn.wv);
      out.emplace_back(p + "attn.wo", blk.attn.wo);
      out.emplace_back(p + "moe_gain", blk.moe_gain);
      out.emplace_back(p + "router.weight", blk.moe.router.weight);
      out.emplace_back(p + "router.bias", blk.moe.router.bias);
      for (std::size_t e = 0; e < blk.moe.experts.size(); ++e) {
        const std::string ep = p + "expert" + std::to_string(e) + ".";
        out.emplace_back(ep + "w1", blk.moe.experts[e].w1);
        out.emplace_back(ep + "w2", blk.moe.experts[e].w2);
      }
    }
    out.emplace_back("final_gain", final_gain);
    out.emplace_back("head", head);
    return out;
  }

  std::vector<std::pair<std::string, Tensor<Real>>> trainable() const {
    std::vector<std::pair<std::string, Tensor<Real>>> out;
    for (auto& [name, t] : named())
      if (t.requires_grad()) out.emplace_back(name, t);
    return out;
  }

  /// Value-only snapshot: same shapes, no gradient tracking. Forwards over
  /// the view build no backprop closures (cheap rollouts and decoding).
  ModelParams detached_view() const {
    ModelParams v;
    v.config = config;
    v.token_embed = detach(token_embed);
    v.pos_embed = detach(pos_embed);
    v.final_gain = detach(final_gain);
    v.head = detach(head);
    for (const auto& blk : blocks) {
      BlockParams<Real> nb;
      nb.attn_gain = detach(blk.attn_gain);
      nb.moe_gain = detach(blk.moe_gain);
      nb.attn = {detach(blk.attn.wq), detach(blk.attn.wk), detach(blk.attn.wv),
                 detach(blk.attn.wo)};
      nb.moe.router = {detach(blk.moe.router.weight), detach(blk.moe.router.bias)};
      nb.moe.top_k = blk.moe.top_k;
      nb.moe.act = blk.moe.act;
      for (const auto& e : blk.moe.experts) nb.moe.experts.push_back({detach(e.w1), detach(e.w2)});
      v.blocks.push_back(std::move(nb));
    }
    return v;
  }
};

/// Gaussian init for matrices and embeddings, ones for norm gains, zeros
/// for the router bias. Draw order follows the canonical parameter order,
/// and zero/one parameters consume no draws, so the stream is a function
/// of the model dimensions alone.
template <class Real>
ModelParams<Real> init_model(const ModelConfig& cfg, std::uint64_t init_seed) {
  cfg.validate();
  ModelParams<Real> p;
  p.config = cfg;
  const std::size_t d = cfg.hidden, v = cfg.vocab_size, h = cfg.expert_hidden;
  const std::size_t n = cfg.num_experts;
  p.token_embed = Tensor<Real>::zeros({v, d}, true);
  p.pos_embed = Tensor<Real>::zeros({cfg.max_seq_len, d}, true);
  for (std::size_t b = 0; b < cfg.num_layers; ++b) {
    BlockParams<Real> blk;
    blk.attn_gain = Tensor<Real>::filled({d}, Real(1), true);
    blk.moe_gain = Tensor<Real>::filled({d}, Real(1), true);
    blk.attn = {Tensor<Real>::zeros({d, d}, true), Tensor<Real>::zeros({d, d}, true),
                Tensor<Real>::zeros({d, d}, true), Tensor<Real>::zeros({d, d}, true)};
    blk.moe.router.weight = Tensor<Real>::zeros({d, n}, true);
    blk.moe.router.bias = Tensor<Real>::zeros({n}, cfg.router_bias);
    blk.moe.top_k = cfg.top_k;
    blk.moe.act = cfg.act;
    for (std::size_t e = 0; e < n; ++e)
      blk.moe.experts.push_back(
          {Tensor<Real>::zeros({d, h}, true), Tensor<Real>::zeros({h, d}, true)});
    p.blocks.push_back(std::move(blk));
  }
  p.final_gain = Tensor<Real>::filled({d}, Real(1), true);
  p.head = Tensor<Real>::zeros({d, v}, true);

  Rng rng(init_seed);
  auto is_gaussian = [](const std::string& name) {
    return name.find("gain") == std::string::npos &&
           name.find("router.bias") == std::string::npos;
  };
  for (auto& [name, t] : p.named()) {
    if (!is_gaussian(name)) continue;
    for (auto& x : t.value()) x = static_cast<Real>(rng.gaussian(0.0, cfg.init_std));
  }
  return p;
}

// ---------------------------------------------------------------------------
// forward passes
// ---------------------------------------------------------------------------

/// Routing the tier-1 pass computed for one sequence, reused verbatim by
/// every other tier's pass at the in-scope layers.
template <class Real>
struct SharedRouting {
  std::vector<LayerRouting<Real>> routing;            // indexed by layer (0-based)
  std::vector<std::vector<TierGroupAssignment>> groups;  // [layer][token] (or [layer][0])
  std::vector<char> filled;
};

enum class PassKind {
  plain,          // standard top-K at every layer
  tier_owner,     // tier 1: computes routing/groups, fills SharedRouting
  tier_follower,  // tier j>1: reuses SharedRouting at in-scope layers
  self_tier,      // tier j routed from this pass's own hidden states
};

template <class Real>
struct PassContext {
  const ModelParams<Real>* params = nullptr;
  LayerScope scope;
  GroupingStrategy strat;  // resolved
  std::uint64_t seq_salt = 0;    // per-sequence salt for random grouping
  std::uint64_t batch_salt = 0;  // per-batch salt (random_per_batch mode)
  const std::vector<std::vector<int>>* static_rankings = nullptr;  // [layer] -> ranking
  SharedRouting<Real>* shared = nullptr;
  // Recording (tier-1 / plain passes): balance inputs and load accounting.
  std::vector<Tensor<Real>>* softmax_rows = nullptr;              // per layer [T x n]
  std::vector<std::vector<std::vector<int>>>* top_sets = nullptr;  // [layer][token]

  std::uint64_t group_salt(std::size_t layer, std::size_t token) const {
    if (strat.random_per_batch) return derive_seed(batch_salt, layer);
    return derive_seed(derive_seed(seq_salt, layer), token);
  }
};

template <class Real>
Tensor<Real> sequence_pass(const std::vector<int>& inputs, PassKind kind, std::size_t tier,
                           PassContext<Real>& ctx) {
  const ModelParams<Real>& P = *ctx.params;
  const ModelConfig& cfg = P.config;
  const std::size_t t = inputs.size();
  if (t == 0 || t > cfg.max_seq_len)
    throw std::invalid_argument("sequence_pass: sequence length " + std::to_string(t) +
                                " outside [1, " + std::to_string(cfg.max_seq_len) + "]");
  const std::size_t d = cfg.hidden, heads = cfg.heads, dh = d / heads;

  std::vector<int> positions(t);
  std::iota(positions.begin(), positions.end(), 0);
  auto x = add(embedding_rows(P.token_embed, inputs), rows_gather(P.pos_embed, positions));

  for (std::size_t b = 0; b < cfg.num_layers; ++b) {
    const auto& blk = P.blocks[b];

    auto hn = rms_norm(x, blk.attn_gain);
    auto q = matmul(hn, blk.attn.wq);
    auto k = matmul(hn, blk.attn.wk);
    auto v = matmul(hn, blk.attn.wv);
    std::vector<Tensor<Real>> head_outs;
    const Real inv_sqrt = Real(1) / std::sqrt(static_cast<Real>(dh));
    for (std::size_t hh = 0; hh < heads; ++hh) {
      auto qh = cols_slice(q, hh * dh, dh);
      auto kh = cols_slice(k, hh * dh, dh);
      auto vh = cols_slice(v, hh * dh, dh);
      auto scores = scale(matmul(qh, transpose(kh)), inv_sqrt);
      head_outs.push_back(matmul(causal_row_softmax(scores), vh));
    }
    x = add(x, matmul(concat_cols(head_outs), blk.attn.wo));

    auto hm = rms_norm(x, blk.moe_gain);
    const bool in_scope = ctx.scope.contains(b + 1);
    Tensor<Real> moe_out;

    if (in_scope && kind == PassKind::tier_follower) {
      const auto& lr = ctx.shared->routing[b];
      const auto& groups = ctx.shared->groups[b];
      std::vector<std::vector<int>> selected(t);
      for (std::size_t tok = 0; tok < t; ++tok)
        selected[tok] = groups[lr.static_ranking ? 0 : tok].groups[tier];
      moe_out = moe_forward_rows(hm, lr.logits, blk.moe, selected);
    } else if (in_scope && (kind == PassKind::tier_owner || kind == PassKind::self_tier)) {
      LayerRouting<Real> lr;
      lr.logits = route_rows(hm, blk.moe.router);
      const std::size_t n = blk.moe.n_experts();
      std::vector<TierGroupAssignment> groups;
      if (ctx.static_rankings) {
        lr.static_ranking = true;
        lr.ranking = {(*ctx.static_rankings)[b]};
        groups.push_back(
            assign_groups(lr.ranking[0], ctx.strat, derive_seed(ctx.batch_salt, b)));
      } else {
        lr.ranking.resize(t);
        groups.resize(t);
        for (std::size_t tok = 0; tok < t; ++tok) {
          lr.ranking[tok] = rank_by_score(lr.logits.value().data() + tok * n, n);
          groups[tok] = assign_groups(lr.ranking[tok], ctx.strat, ctx.group_salt(b, tok));
        }
      }
      std::vector<std::vector<int>> selected(t);
      for (std::size_t tok = 0; tok < t; ++tok)
        selected[tok] = groups[lr.static_ranking ? 0 : tok].groups[tier];
      moe_out = moe_forward_rows(hm, lr.logits, blk.moe, selected);
      if (kind == PassKind::tier_owner) {
        if (ctx.softmax_rows) (*ctx.softmax_rows)[b] = row_softmax(lr.logits);
        if (ctx.top_sets) (*ctx.top_sets)[b] = selected;
        ctx.shared->routing[b] = std::move(lr);
        ctx.shared->groups[b] = std::move(groups);
        ctx.shared->filled[b] = 1;
      }
    } else {
      auto res = moe_block_forward(hm, blk.moe);
      moe_out = res.output;
      if (kind == PassKind::tier_owner || kind == PassKind::plain) {
        if (ctx.softmax_rows) (*ctx.softmax_rows)[b] = row_softmax(res.routing.logits);
        if (ctx.top_sets) (*ctx.top_sets)[b] = std::move(res.selected);
      }
    }
    x = add(x, moe_out);
  }
  return matmul(rms_norm(x, P.final_gain), P.head);
}

/// Teacher-forced log-probabilities of `targets` at the masked positions.
template <class Real>
TierForwardResult<Real> score_logits(const Tensor<Real>& logits,
                                     const std::vector<int>& targets,
                                     const std::vector<std::uint8_t>& response_mask) {
  std::vector<std::pair<int, int>> items;
  for (std::size_t i = 0; i < targets.size(); ++i)
    if (response_mask[i]) items.emplace_back(static_cast<int>(i), targets[i]);
  if (items.empty()) throw std::invalid_argument("score_logits: no scored positions");
  TierForwardResult<Real> r;
  r.token_logprobs = gather_log_softmax(logits, items);
  r.avg_logprob = mean(r.token_logprobs);
  return r;
}

/// One training batch: fixed-length sequences plus the prompt length that
/// separates context from scored response positions.
struct Batch {
  std::vector<std::vector<int>> seqs;  // each: prompt tokens, SEP, response tokens
  std::size_t prompt_len = 0;          // tokens before the separator

  std::size_t input_len() const { return seqs.empty() ? 0 : seqs[0].size() - 1; }
};

inline std::vector<int> batch_inputs(const std::vector<int>& seq) {
  return std::vector<int>(seq.begin(), seq.end() - 1);
}

inline std::vector<int> batch_targets(const std::vector<int>& seq) {
  return std::vector<int>(seq.begin() + 1, seq.end());
}

inline std::vector<std::uint8_t> response_mask_for(std::size_t input_len,
                                                   std::size_t prompt_len) {
  std::vector<std::uint8_t> mask(input_len, 0);
  for (std::size_t i = prompt_len; i < input_len; ++i) mask[i] = 1;
  return mask;
}

/// Everything the loss assembly needs from the batch's forward passes.
template <class Real>
struct BatchForward {
  std::vector<Tensor<Real>> tier_avg;  // batch-mean L-bar per built tier
  Tensor<Real> ntp;
  Tensor<Real> balance;
  std::vector<std::vector<std::size_t>> load_counts;  // [layer][expert]
  std::vector<Tensor<Real>> tier1_logits;             // per sequence [T x V]
};

namespace detail {

template <class Real>
Tensor<Real> mean_of_scalars(const std::vector<Tensor<Real>>& xs) {
  return mean(concat_scalars(xs));
}

/// Per-layer batch-mean full softmax of detached routing logits.
template <class Real>
std::vector<std::vector<Real>> batch_mean_router_softmax(
    const std::vector<std::vector<Tensor<Real>>>& per_seq_rows) {
  std::vector<std::vector<Real>> out;
  const std::size_t layers = per_seq_rows.empty() ? 0 : per_seq_rows[0].size();
  for (std::size_t l = 0; l < layers; ++l) {
    std::vector<Real> acc;
    std::size_t total_rows = 0;
    for (const auto& seq_rows : per_seq_rows) {
      const auto& t = seq_rows[l];
      const std::size_t rows = t.shape()[0], n = t.shape()[1];
      if (acc.empty()) acc.assign(n, Real(0));
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < n; ++j) acc[j] += t.value()[i * n + j];
      total_rows += rows;
    }
    for (auto& v : acc) v /= static_cast<Real>(total_rows);
    out.push_back(std::move(acc));
  }
  return out;
}

}  // namespace detail

/// Static-average grouping basis for this batch: run a value-only plain
/// pass, average the full-softmax router distributions per layer, fold in
/// the running window, and rank experts by the averaged distribution.
template <class Real>
std::vector<std::vector<int>> static_rankings_for_batch(
    const Batch& batch, const ModelParams<Real>& params,
    std::vector<RunningRouterMean<Real>>* means, bool update_means) {
  const ModelConfig& cfg = params.config;
  auto view = params.detached_view();
  std::vector<std::vector<Tensor<Real>>> per_seq_rows;
  for (const auto& seq : batch.seqs) {
    PassContext<Real> ctx;
    ctx.params = &view;
    ctx.scope.layers.clear();  // plain pass: no tier restriction anywhere
    std::vector<Tensor<Real>> rows(cfg.num_layers);
    std::vector<std::vector<std::vector<int>>> sets(cfg.num_layers);
    ctx.softmax_rows = &rows;
    ctx.top_sets = &sets;
    sequence_pass(batch_inputs(seq), PassKind::plain, 0, ctx);
    per_seq_rows.push_back(std::move(rows));
  }
  auto layer_means = detail::batch_mean_router_softmax(per_seq_rows);
  std::vector<std::vector<int>> rankings;
  for (std::size_t l = 0; l < layer_means.size(); ++l) {
    std::vector<Real> basis = layer_means[l];
    if (means) {
      basis = (*means)[l].mean_with(layer_means[l]);
      if (update_means) (*means)[l].push(std::move(layer_means[l]));
    }
    rankings.push_back(rank_by_score(basis.data(), basis.size()));
  }
  return rankings;
}

/// All tier passes for one batch under the tier-restricted objective.
/// `build_tiers` counts the passes to run (1 = top tier only; callers pass
/// C when the rank loss or per-tier evaluation needs every tier).
template <class Real>
BatchForward<Real> tiered_batch_forward(const Batch& batch, const ModelParams<Real>& params,
                                        std::size_t build_tiers, std::uint64_t step_salt,
                                        const std::vector<std::vector<int>>* static_rankings) {
  const ModelConfig& cfg = params.config;
  const GroupingStrategy strat = cfg.resolved_grouping();
  const LayerScope scope = cfg.resolved_scope();
  const std::size_t input_len = batch.input_len();
  const auto mask = response_mask_for(input_len, batch.prompt_len);

  BatchForward<Real> out;
  out.load_counts.assign(cfg.num_layers,
                         std::vector<std::size_t>(cfg.num_experts, 0));
  std::vector<std::vector<Tensor<Real>>> tier_seq_avg(build_tiers);
  std::vector<std::vector<Tensor<Real>>> balance_rows(cfg.num_layers);
  std::vector<std::vector<std::vector<int>>> balance_sets(cfg.num_layers);

  for (std::size_t s = 0; s < batch.seqs.size(); ++s) {
    const auto inputs = batch_inputs(batch.seqs[s]);
    const auto targets = batch_targets(batch.seqs[s]);

    SharedRouting<Real> shared;
    shared.routing.resize(cfg.num_layers);
    shared.groups.resize(cfg.num_layers);
    shared.filled.assign(cfg.num_layers, 0);

    PassContext<Real> ctx;
    ctx.params = &params;
    ctx.scope = scope;
    ctx.strat = strat;
    ctx.seq_salt = derive_seed(step_salt, s);
    ctx.batch_salt = step_salt;
    ctx.static_rankings = static_rankings;
    ctx.shared = &shared;
    std::vector<Tensor<Real>> rows(cfg.num_layers);
    std::vector<std::vector<std::vector<int>>> sets(cfg.num_layers);
    ctx.softmax_rows = &rows;
    ctx.top_sets = &sets;

    auto logits1 = sequence_pass(inputs, PassKind::tier_owner, 0, ctx);
    out.tier1_logits.push_back(logits1);
    tier_seq_avg[0].push_back(score_logits(logits1, targets, mask).avg_logprob);

    ctx.softmax_rows = nullptr;
    ctx.top_sets = nullptr;
    for (std::size_t j = 1; j < build_tiers; ++j) {
      auto logits_j = sequence_pass(inputs, PassKind::tier_follower, j, ctx);
      tier_seq_avg[j].push_back(score_logits(logits_j, targets, mask).avg_logprob);
    }

    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
      balance_rows[l].push_back(rows[l]);
      for (const auto& set : sets[l])
        for (int e : set) out.load_counts[l][static_cast<std::size_t>(e)] += 1;
      balance_sets[l].insert(balance_sets[l].end(), sets[l].begin(), sets[l].end());
    }
  }

  for (std::size_t j = 0; j < build_tiers; ++j)
    out.tier_avg.push_back(detail::mean_of_scalars(tier_seq_avg[j]));
  out.ntp = neg(out.tier_avg[0]);

  std::vector<Tensor<Real>> layer_balance;
  for (std::size_t l = 0; l < cfg.num_layers; ++l)
    layer_balance.push_back(balance_loss(concat_rows(balance_rows[l]), balance_sets[l]));
  out.balance = detail::mean_of_scalars(layer_balance);
  return out;
}

/// Plain next-token training forward: standard top-K everywhere, no tier
/// machinery touched. The independent baseline the tiered objective must
/// reduce to when the rank loss is inactive.
template <class Real>
BatchForward<Real> plain_batch_forward(const Batch& batch, const ModelParams<Real>& params) {
  const ModelConfig& cfg = params.config;
  const std::size_t input_len = batch.input_len();
  const auto mask = response_mask_for(input_len, batch.prompt_len);

  BatchForward<Real> out;
  out.load_counts.assign(cfg.num_layers, std::vector<std::size_t>(cfg.num_experts, 0));
  std::vector<Tensor<Real>> seq_avg;
  std::vector<std::vector<Tensor<Real>>> balance_rows(cfg.num_layers);
  std::vector<std::vector<std::vector<int>>> balance_sets(cfg.num_layers);

  for (const auto& seq : batch.seqs) {
    PassContext<Real> ctx;
    ctx.params = &params;
    ctx.scope.layers.clear();
    std::vector<Tensor<Real>> rows(cfg.num_layers);
    std::vector<std::vector<std::vector<int>>> sets(cfg.num_layers);
    ctx.softmax_rows = &rows;
    ctx.top_sets = &sets;
    auto logits = sequence_pass(batch_inputs(seq), PassKind::plain, 0, ctx);
    out.tier1_logits.push_back(logits);
    seq_avg.push_back(score_logits(logits, batch_targets(seq), mask).avg_logprob);
    for (std::size_t l = 0; l < cfg.num_layers; ++l) {
      balance_rows[l].push_back(rows[l]);
      for (const auto& set : sets[l])
        for (int e : set) out.load_counts[l][static_cast<std::size_t>(e)] += 1;
      balance_sets[l].insert(balance_sets[l].end(), sets[l].begin(), sets[l].end());
    }
  }

  out.tier_avg.push_back(detail::mean_of_scalars(seq_avg));
  out.ntp = neg(out.tier_avg[0]);
  std::vector<Tensor<Real>> layer_balance;
  for (std::size_t l = 0; l < cfg.num_layers; ++l)
    layer_balance.push_back(balance_loss(concat_rows(balance_rows[l]), balance_sets[l]));
  out.balance = detail::mean_of_scalars(layer_balance);
  return out;
}

// ---------------------------------------------------------------------------
// rollouts and decoding
// ---------------------------------------------------------------------------

/// Decode `resp_len` tokens after the prompt under tier `tier`'s restricted
/// routing (tier 0 = deployment path). Greedy at temperature 0, otherwise
/// softmax sampling with the supplied generator. Value-only.
template <class Real>
std::vector<int> decode_tier(const std::vector<int>& prompt_with_sep, std::size_t resp_len,
                             std::size_t tier, const ModelParams<Real>& params,
                             std::uint64_t salt, double temperature = 0.0,
                             Rng* sampler = nullptr) {
  auto view = params.detached_view();
  const ModelConfig& cfg = params.config;
  std::vector<int> seq = prompt_with_sep;
  std::vector<int> generated;
  for (std::size_t step = 0; step < resp_len; ++step) {
    PassContext<Real> ctx;
    ctx.params = &view;
    ctx.scope = cfg.resolved_scope();
    ctx.strat = cfg.resolved_grouping();
    ctx.seq_salt = salt;
    ctx.batch_salt = salt;
    auto logits = sequence_pass(seq, PassKind::self_tier, tier, ctx);
    const std::size_t t = seq.size(), v = cfg.vocab_size;
    const Real* last = logits.value().data() + (t - 1) * v;
    int next = 0;
    if (temperature > 0.0 && sampler) {
      std::vector<double> probs(v);
      double mx = static_cast<double>(last[0]);
      for (std::size_t i = 1; i < v; ++i) mx = std::max(mx, static_cast<double>(last[i]));
      double denom = 0;
      for (std::size_t i = 0; i < v; ++i) {
        probs[i] = std::exp((static_cast<double>(last[i]) - mx) / temperature);
        denom += probs[i];
      }
      double u = sampler->uniform() * denom, acc = 0;
      for (std::size_t i = 0; i < v; ++i) {
        acc += probs[i];
        if (u < acc) {
          next = static_cast<int>(i);
          break;
        }
        next = static_cast<int>(i);
      }
    } else {
      for (std::size_t i = 1; i < v; ++i)
        if (last[i] > last[static_cast<std::size_t>(next)]) next = static_cast<int>(i);
    }
    generated.push_back(next);
    seq.push_back(next);
  }
  return generated;
}

/// Sampled-rollout tier scores: each tier decodes its own response and is
/// scored, with gradients, on its own tokens under its own routing.
template <class Real>
std::vector<Tensor<Real>> sampled_tier_avgs(const Batch& batch,
                                            const ModelParams<Real>& params,
                                            std::size_t tiers, std::uint64_t step_salt,
                                            Rng* sampler) {
  const ModelConfig& cfg = params.config;
  const std::size_t resp_len = batch.seqs[0].size() - batch.prompt_len - 1;
  std::vector<std::vector<Tensor<Real>>> per_tier(tiers);
  for (std::size_t s = 0; s < batch.seqs.size(); ++s) {
    const auto& seq = batch.seqs[s];
    std::vector<int> prompt(seq.begin(),
                            seq.begin() + static_cast<std::ptrdiff_t>(batch.prompt_len + 1));
    for (std::size_t j = 0; j < tiers; ++j) {
      const std::uint64_t salt = derive_seed(derive_seed(step_salt, s), j);
      auto rollout = decode_tier(prompt, resp_len, j, params, salt,
                                 cfg.rollout_temperature, sampler);
      std::vector<int> full = prompt;
      full.insert(full.end(), rollout.begin(), rollout.end());
      PassContext<Real> ctx;
      ctx.params = &params;
      ctx.scope = cfg.resolved_scope();
      ctx.strat = cfg.resolved_grouping();
      ctx.seq_salt = salt;
      ctx.batch_salt = salt;
      auto logits = sequence_pass(batch_inputs(full), PassKind::self_tier, j, ctx);
      const auto mask = response_mask_for(full.size() - 1, batch.prompt_len);
      per_tier[j].push_back(score_logits(logits, batch_targets(full), mask).avg_logprob);
    }
  }
  std::vector<Tensor<Real>> out;
  for (std::size_t j = 0; j < tiers; ++j)
    out.push_back(detail::mean_of_scalars(per_tier[j]));
  return out;
}

// ---------------------------------------------------------------------------
// loss assembly
// ---------------------------------------------------------------------------

template <class Real>
struct StepOutputs {
  LossBreakdown<Real> loss;
  BatchForward<Real> forward;
};

/// Build the full objective for one batch: tier passes, rank loss when
/// active, next-token loss from the top tier, pooled balance penalty.
template <class Real>
StepOutputs<Real> build_objective(const Batch& batch, const ModelParams<Real>& params,
                                  std::uint64_t step_salt,
                                  std::vector<RunningRouterMean<Real>>* static_means,
                                  bool update_static, Rng* sampler = nullptr,
                                  bool force_all_tiers = false) {
  const ModelConfig& cfg = params.config;
  const bool erl_on = cfg.erl_active();
  const std::size_t tiers = cfg.grouping.tiers;
  const bool teacher_tiers = (erl_on && cfg.rollout == RolloutMode::teacher_forced) ||
                             force_all_tiers;
  const std::size_t build_tiers = teacher_tiers && tiers >= 2 ? tiers : 1;

  std::vector<std::vector<int>> static_rankings;
  const std::vector<std::vector<int>>* rankings_ptr = nullptr;
  if (cfg.grouping.mode == GroupingMode::static_average &&
      !cfg.resolved_scope().layers.empty()) {
    static_rankings = static_rankings_for_batch(batch, params, static_means, update_static);
    rankings_ptr = &static_rankings;
  }

  StepOutputs<Real> out;
  out.forward = tiered_batch_forward(batch, params, build_tiers, step_salt, rankings_ptr);

  Tensor<Real> erl = Tensor<Real>::scalar(Real(0));
  Tensor<Real> advantages;
  if (erl_on) {
    advantages = compute_advantages<Real>(cfg.rewards, cfg.sample_std_advantages);
    std::vector<Tensor<Real>> tier_scalars;
    if (cfg.rollout == RolloutMode::sampled)
      tier_scalars = sampled_tier_avgs(batch, params, tiers, step_salt, sampler);
    else
      tier_scalars = out.forward.tier_avg;
    if (cfg.stop_lower_tier_grad)
      for (std::size_t j = 1; j < tier_scalars.size(); ++j)
        tier_scalars[j] = detach(tier_scalars[j]);
    erl = erl_loss(concat_scalars(tier_scalars), advantages);
  }
  out.loss = total_loss(out.forward.ntp, erl, out.forward.balance, cfg.lambda_erl,
                        cfg.lambda_balance, advantages);
  return out;
}

/// The baseline objective over the plain forward: ntp + balance only.
template <class Real>
StepOutputs<Real> build_plain_objective(const Batch& batch, const ModelParams<Real>& params) {
  const ModelConfig& cfg = params.config;
  StepOutputs<Real> out;
  out.forward = plain_batch_forward(batch, params);
  out.loss = total_loss(out.forward.ntp, Tensor<Real>::scalar(Real(0)), out.forward.balance,
                        cfg.lambda_erl, cfg.lambda_balance);
  return out;
}

}  // namespace ordmoe
