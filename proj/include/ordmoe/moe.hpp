#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "ordmoe/autodiff.hpp"
#include "ordmoe/common.hpp"

namespace ordmoe {

/// Linear router: logits = x . weight + bias, one logit per expert.
template <class Real>
struct RouterParams {
  Tensor<Real> weight;  // [d x n_experts]
  Tensor<Real> bias;    // [n_experts]
};

/// Two-layer feed-forward expert without biases.
template <class Real>
struct ExpertParams {
  Tensor<Real> w1;  // [d x h]
  Tensor<Real> w2;  // [h x d]
};

/// One sparse MoE block: router plus n identically shaped experts.
template <class Real>
struct MoeLayer {
  RouterParams<Real> router;
  std::vector<ExpertParams<Real>> experts;
  std::size_t top_k = 1;
  Activation act = Activation::silu;

  std::size_t n_experts() const { return experts.size(); }
};

/// Routing record for a single token: live logits plus detached ranking.
template <class Real>
struct RoutingState {
  Tensor<Real> logits;        // [n], graph node
  std::vector<int> ranking;   // expert ids, best first; ties broken by lower id
  Tensor<Real> full_softmax;  // [n], softmax over all experts
};

/// Routing record for a whole [T x d] block at one MoE layer. The logits
/// node is shared by every tier pass that gates this layer, so the router
/// runs once per token per layer. `ranking` has one entry per token, or a
/// single entry applied to all tokens when the grouping basis is static.
template <class Real>
struct LayerRouting {
  Tensor<Real> logits;  // [T x n]
  std::vector<std::vector<int>> ranking;
  bool static_ranking = false;

  const std::vector<int>& ranking_for(std::size_t t) const {
    return static_ranking ? ranking[0] : ranking[t];
  }
};

namespace detail {

template <class Real>
void check_finite(const std::vector<Real>& v, const char* what) {
  for (std::size_t i = 0; i < v.size(); ++i)
    if (!std::isfinite(static_cast<double>(v[i])))
      throw numeric_error(std::string(what) + ": non-finite value at flat index " +
                          std::to_string(i));
}

}  // namespace detail

/// Experts sorted by descending score; equal scores keep ascending id order.
template <class Real>
std::vector<int> rank_by_score(const Real* scores, std::size_t n) {
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [scores](int a, int b) { return scores[a] > scores[b]; });
  return order;
}

/// Top-k of `ranking` restricted to a candidate set, returned ascending.
/// If the candidate set has at most k members the whole set is returned.
inline std::vector<int> restricted_top_k(const std::vector<int>& ranking,
                                         const std::vector<int>& candidates, std::size_t k) {
  if (candidates.empty()) throw std::invalid_argument("restricted_top_k: empty candidate set");
  if (candidates.size() <= k) {
    auto out = candidates;
    std::sort(out.begin(), out.end());
    return out;
  }
  std::vector<char> allowed(ranking.size(), 0);
  for (int c : candidates) allowed[static_cast<std::size_t>(c)] = 1;
  std::vector<int> out;
  out.reserve(k);
  for (int e : ranking) {
    if (allowed[static_cast<std::size_t>(e)]) {
      out.push_back(e);
      if (out.size() == k) break;
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------------------------
// single-token surface
// ---------------------------------------------------------------------------

template <class Real>
RoutingState<Real> route(const Tensor<Real>& x, const RouterParams<Real>& params) {
  if (x.shape().size() != 1) throw shape_error("route: expected 1-D input");
  detail::check_finite(x.value(), "route input");
  auto x_row = reshape(x, {1, x.numel()});
  auto logits2 = add_rows(matmul(x_row, params.weight), params.bias);
  RoutingState<Real> state;
  state.logits = reshape(logits2, {params.bias.numel()});
  state.ranking = rank_by_score(state.logits.value().data(), state.logits.numel());
  state.full_softmax = row_softmax(logits2);
  state.full_softmax = reshape(state.full_softmax, {params.bias.numel()});
  return state;
}

template <class Real>
std::vector<int> top_k_select(const RoutingState<Real>& state, std::size_t k) {
  if (k < 1 || k > state.ranking.size())
    throw std::invalid_argument("top_k_select: k = " + std::to_string(k) +
                                " outside [1, " + std::to_string(state.ranking.size()) + "]");
  std::vector<int> out(state.ranking.begin(),
                       state.ranking.begin() + static_cast<std::ptrdiff_t>(k));
  std::sort(out.begin(), out.end());
  return out;
}

/// Gating weights: softmax over the selected subset, exact zeros elsewhere.
template <class Real>
Tensor<Real> gate_weights(const RoutingState<Real>& state, const std::vector<int>& selected) {
  return masked_softmax(state.logits, selected);
}

// ---------------------------------------------------------------------------
// expert dispatch (batched)
// ---------------------------------------------------------------------------

/// Combine per-expert outputs back into token order, weighted by gates:
/// out[t] = sum over experts e with t assigned to e of gates[t, e] * Ye[t].
/// Experts contribute in ascending id order, so the accumulation order is
/// reproducible bit for bit across call sites.
template <class Real>
Tensor<Real> moe_combine(const Tensor<Real>& gates,
                         const std::vector<std::pair<int, std::vector<int>>>& placement,
                         const std::vector<Tensor<Real>>& expert_outputs, std::size_t d) {
  const std::size_t t = gates.shape()[0];
  const std::size_t n = gates.shape()[1];
  if (placement.size() != expert_outputs.size())
    throw std::invalid_argument("moe_combine: placement/output count mismatch");
  std::vector<std::shared_ptr<TensorNode<Real>>> parents{gates.node()};
  for (const auto& y : expert_outputs) parents.push_back(y.node());
  auto out = detail::make_node<Real>({t, d}, std::move(parents), "moe_combine");
  for (std::size_t p = 0; p < placement.size(); ++p) {
    const auto& [expert, rows] = placement[p];
    const auto& yv = expert_outputs[p].value();
    for (std::size_t i = 0; i < rows.size(); ++i) {
      const std::size_t tok = static_cast<std::size_t>(rows[i]);
      const Real g = gates.value()[tok * n + static_cast<std::size_t>(expert)];
      const Real* src = yv.data() + i * d;
      Real* dst = out.value().data() + tok * d;
      for (std::size_t j = 0; j < d; ++j) dst[j] += g * src[j];
    }
  }
  if (out.requires_grad()) {
    out.node()->backprop = [placement, n, d](TensorNode<Real>& self) {
      auto& gates_node = *self.parents[0];
      Real* ggates = gates_node.grad_acc();
      for (std::size_t p = 0; p < placement.size(); ++p) {
        const auto& [expert, rows] = placement[p];
        auto& ynode = *self.parents[p + 1];
        Real* gy = ynode.grad_acc();
        for (std::size_t i = 0; i < rows.size(); ++i) {
          const std::size_t tok = static_cast<std::size_t>(rows[i]);
          const Real g = gates_node.value[tok * n + static_cast<std::size_t>(expert)];
          const Real* go = self.grad.data() + tok * d;
          if (gy) {
            Real* gyrow = gy + i * d;
            for (std::size_t j = 0; j < d; ++j) gyrow[j] += g * go[j];
          }
          if (ggates) {
            const Real* yrow = ynode.value.data() + i * d;
            Real acc = Real(0);
            for (std::size_t j = 0; j < d; ++j) acc += go[j] * yrow[j];
            ggates[tok * n + static_cast<std::size_t>(expert)] += acc;
          }
        }
      }
    };
  }
  return out;
}

/// Router logits for a [T x d] block of token states.
template <class Real>
Tensor<Real> route_rows(const Tensor<Real>& x, const RouterParams<Real>& params) {
  if (x.shape().size() != 2) throw shape_error("route_rows: expected 2-D input");
  detail::check_finite(x.value(), "route_rows input");
  return add_rows(matmul(x, params.weight), params.bias);
}

/// Sparse expert mixture over a [T x d] block. `selected[t]` names the
/// experts active for token t; gating renormalizes `logits` over exactly
/// that set. Tokens are dispatched to each active expert in one batch.
template <class Real>
Tensor<Real> moe_forward_rows(const Tensor<Real>& x, const Tensor<Real>& logits,
                              const MoeLayer<Real>& layer,
                              const std::vector<std::vector<int>>& selected) {
  const std::size_t t = x.shape()[0], d = x.shape()[1];
  const std::size_t n = layer.n_experts();
  if (selected.size() != t)
    throw std::invalid_argument("moe_forward_rows: need one expert set per token");

  auto gates = masked_row_softmax(logits, selected);

  std::vector<std::vector<int>> rows_of(n);
  for (std::size_t tok = 0; tok < t; ++tok)
    for (int e : selected[tok]) rows_of[static_cast<std::size_t>(e)].push_back(
        static_cast<int>(tok));

  std::vector<std::pair<int, std::vector<int>>> placement;
  std::vector<Tensor<Real>> outputs;
  for (std::size_t e = 0; e < n; ++e) {
    if (rows_of[e].empty()) continue;
    auto xe = rows_gather(x, rows_of[e]);
    auto h = activate(matmul(xe, layer.experts[e].w1), layer.act);
    outputs.push_back(matmul(h, layer.experts[e].w2));
    placement.emplace_back(static_cast<int>(e), std::move(rows_of[e]));
  }
  return moe_combine(gates, placement, outputs, d);
}

template <class Real>
struct MoeBlockResult {
  Tensor<Real> output;
  LayerRouting<Real> routing;
  std::vector<std::vector<int>> selected;  // top-K sets, per token, ascending
};

/// Standard top-K forward for a block: route, pick top-K per token, mix.
template <class Real>
MoeBlockResult<Real> moe_block_forward(const Tensor<Real>& x, const MoeLayer<Real>& layer) {
  MoeBlockResult<Real> res;
  res.routing.logits = route_rows(x, layer.router);
  const std::size_t t = x.shape()[0];
  const std::size_t n = layer.n_experts();
  res.routing.ranking.resize(t);
  res.selected.resize(t);
  std::vector<int> all(n);
  std::iota(all.begin(), all.end(), 0);
  for (std::size_t tok = 0; tok < t; ++tok) {
    res.routing.ranking[tok] = rank_by_score(res.routing.logits.value().data() + tok * n, n);
    res.selected[tok] = restricted_top_k(res.routing.ranking[tok], all, layer.top_k);
  }
  res.output = moe_forward_rows(x, res.routing.logits, layer, res.selected);
  return res;
}

// ---------------------------------------------------------------------------
// single-token entry points over the batched kernels
// ---------------------------------------------------------------------------

/// v = sum_i gates[i] * E_i(x); experts with a zero gate are never evaluated.
template <class Real>
Tensor<Real> moe_forward(const Tensor<Real>& x, const Tensor<Real>& gates,
                         const MoeLayer<Real>& layer) {
  if (x.shape().size() != 1 || gates.shape().size() != 1 ||
      gates.numel() != layer.n_experts())
    throw shape_error("moe_forward: expected x[d] and gates[n_experts]");
  const std::size_t d = x.numel();
  std::vector<std::pair<int, std::vector<int>>> placement;
  std::vector<Tensor<Real>> outputs;
  auto x_row = reshape(x, {1, d});
  for (std::size_t e = 0; e < layer.n_experts(); ++e) {
    if (gates.value()[e] == Real(0)) continue;
    auto h = activate(matmul(x_row, layer.experts[e].w1), layer.act);
    outputs.push_back(matmul(h, layer.experts[e].w2));
    placement.emplace_back(static_cast<int>(e), std::vector<int>{0});
  }
  if (placement.empty())
    throw std::invalid_argument("moe_forward: gate vector has empty support");
  auto combined = moe_combine(reshape(gates, {1, layer.n_experts()}), placement, outputs, d);
  return reshape(combined, {d});
}

/// Forward through the experts of one rank-tier group: gates renormalize
/// over the group, every other expert stays inactive. Reuses the routing
/// state computed once for this token, so tiers cannot diverge on scores.
template <class Real>
Tensor<Real> tier_restricted_forward(const Tensor<Real>& x, const std::vector<int>& group,
                                     const RoutingState<Real>& state,
                                     const MoeLayer<Real>& layer) {
  if (group.empty()) throw std::invalid_argument("tier_restricted_forward: empty group");
  return moe_forward(x, gate_weights(state, group), layer);
}

}  // namespace ordmoe
