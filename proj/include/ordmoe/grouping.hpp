#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <deque>
#include <numeric>
#include <string>
#include <vector>

#include "ordmoe/common.hpp"
#include "ordmoe/rng.hpp"

namespace ordmoe {

enum class GroupingKind { uniform, high_only, random, uneven };
enum class GroupingMode { dynamic_per_token, static_average };

inline const char* grouping_kind_name(GroupingKind k) {
  switch (k) {
    case GroupingKind::uniform: return "uniform";
    case GroupingKind::high_only: return "high_only";
    case GroupingKind::random: return "random";
    case GroupingKind::uneven: return "uneven";
  }
  return "?";
}

inline const char* grouping_mode_name(GroupingMode m) {
  return m == GroupingMode::dynamic_per_token ? "dynamic_per_token" : "static_average";
}

/// How the C preference tiers of experts are carved out of a ranking.
/// Ranks are 1-based ordinal positions (rank 1 = highest router score);
/// expert ids are 0-based.
struct GroupingStrategy {
  GroupingKind kind = GroupingKind::uniform;
  std::size_t tiers = 3;                       // C
  std::size_t group_size = 2;                  // K, per-tier size unless uneven
  std::vector<std::size_t> sizes;              // resolved per-tier sizes
  std::vector<std::size_t> start_ranks;        // resolved per-tier start ranks
  std::uint64_t seed = 0;                      // random kind only
  bool random_per_batch = false;               // random: one shuffle per batch
  GroupingMode mode = GroupingMode::dynamic_per_token;
  std::size_t window = 1;                      // static_average: batches averaged
};

/// The C mutually exclusive expert sets for one token (or one layer in
/// static mode), ordered from most to least preferred tier.
struct TierGroupAssignment {
  std::vector<std::vector<int>> groups;
};

enum class ScopeKind { full, shallow, deep, even, explicit_set };

inline const char* scope_kind_name(ScopeKind k) {
  switch (k) {
    case ScopeKind::full: return "full";
    case ScopeKind::shallow: return "shallow";
    case ScopeKind::deep: return "deep";
    case ScopeKind::even: return "even";
    case ScopeKind::explicit_set: return "explicit";
  }
  return "?";
}

/// Which transformer layers apply tier-restricted routing (1-based indices).
struct LayerScope {
  ScopeKind kind = ScopeKind::full;
  std::vector<std::size_t> layers;

  bool contains(std::size_t layer_1based) const {
    return std::find(layers.begin(), layers.end(), layer_1based) != layers.end();
  }
};

/// Start ranks (1-based) of C blocks of size k chosen from the grid of
/// floor(n/k) contiguous rank blocks: blocks are spaced uniformly over the
/// grid, always keeping the first block, and for C >= 2 the last block,
/// which is anchored to the bottom ranks n-k+1..n.
inline std::vector<std::size_t> default_block_positions(std::size_t n, std::size_t k,
                                                        std::size_t c) {
  if (c < 1 || k < 1 || c * k > n)
    throw std::invalid_argument("default_block_positions: need tiers*size <= experts, got " +
                                std::to_string(c) + "*" + std::to_string(k) + " > " +
                                std::to_string(n));
  const std::size_t blocks = n / k;
  auto start_of_block = [&](std::size_t b) {  // b in 1..blocks
    return b == blocks ? n - k + 1 : k * (b - 1) + 1;
  };
  std::vector<std::size_t> starts;
  if (c == 1) {
    starts.push_back(start_of_block(1));
    return starts;
  }
  for (std::size_t j = 0; j < c; ++j)
    starts.push_back(start_of_block(1 + j * (blocks - 1) / (c - 1)));
  return starts;
}

namespace detail {

inline void check_tier_layout(const std::vector<std::size_t>& starts,
                              const std::vector<std::size_t>& sizes, std::size_t n,
                              const char* what) {
  if (starts.size() != sizes.size())
    throw std::invalid_argument(std::string(what) + ": start/size count mismatch");
  std::vector<std::pair<std::size_t, std::size_t>> ranges;
  for (std::size_t j = 0; j < starts.size(); ++j) {
    if (sizes[j] < 1 || starts[j] < 1 || starts[j] + sizes[j] - 1 > n)
      throw std::invalid_argument(std::string(what) + ": tier " + std::to_string(j + 1) +
                                  " rank range [" + std::to_string(starts[j]) + ", " +
                                  std::to_string(starts[j] + sizes[j] - 1) +
                                  "] outside 1.." + std::to_string(n));
    ranges.emplace_back(starts[j], starts[j] + sizes[j] - 1);
  }
  auto sorted = ranges;
  std::sort(sorted.begin(), sorted.end());
  for (std::size_t j = 1; j < sorted.size(); ++j)
    if (sorted[j].first <= sorted[j - 1].second)
      throw std::invalid_argument(std::string(what) + ": overlapping rank ranges [" +
                                  std::to_string(sorted[j - 1].first) + ", " +
                                  std::to_string(sorted[j - 1].second) + "] and [" +
                                  std::to_string(sorted[j].first) + ", " +
                                  std::to_string(sorted[j].second) + "]");
}

}  // namespace detail

/// Fill in derived fields (sizes, start ranks) and validate against n.
inline GroupingStrategy resolve_strategy(GroupingStrategy s, std::size_t n) {
  if (s.tiers < 1) throw std::invalid_argument("grouping: tiers must be >= 1");
  switch (s.kind) {
    case GroupingKind::uniform:
      if (s.sizes.empty()) s.sizes.assign(s.tiers, s.group_size);
      if (s.start_ranks.empty())
        s.start_ranks = default_block_positions(n, s.group_size, s.tiers);
      detail::check_tier_layout(s.start_ranks, s.sizes, n, "uniform grouping");
      if (s.tiers >= 2) {
        const bool has_top = s.start_ranks.front() == 1;
        const bool has_bottom = s.start_ranks.back() + s.sizes.back() - 1 == n;
        if (!has_top || !has_bottom)
          throw std::invalid_argument(
              "uniform grouping: tiers must include the top block (rank 1) and the bottom "
              "block (rank " + std::to_string(n) + ")");
      }
      break;
    case GroupingKind::high_only:
      if (s.tiers * s.group_size > n)
        throw std::invalid_argument("high_only grouping: tiers*size exceeds expert count");
      s.sizes.assign(s.tiers, s.group_size);
      s.start_ranks.clear();
      for (std::size_t j = 0; j < s.tiers; ++j) s.start_ranks.push_back(j * s.group_size + 1);
      break;
    case GroupingKind::random:
      if (s.tiers * s.group_size > n)
        throw std::invalid_argument("random grouping: tiers*size exceeds expert count");
      s.sizes.assign(s.tiers, s.group_size);
      s.start_ranks.clear();
      for (std::size_t j = 0; j < s.tiers; ++j) s.start_ranks.push_back(j * s.group_size + 1);
      break;
    case GroupingKind::uneven:
      if (s.sizes.size() != s.tiers || s.start_ranks.size() != s.tiers)
        throw std::invalid_argument(
            "uneven grouping: explicit sizes and start_ranks required, one per tier");
      detail::check_tier_layout(s.start_ranks, s.sizes, n, "uneven grouping");
      break;
  }
  std::size_t total = 0;
  for (auto v : s.sizes) total += v;
  if (total > n)
    throw std::invalid_argument("grouping: total grouped experts " + std::to_string(total) +
                                " exceeds expert count " + std::to_string(n));
  return s;
}

/// Carve the C tier groups out of a ranking (expert ids best-first).
/// `random_salt` feeds the seeded shuffle for the random kind: in dynamic
/// mode callers pass the token index, in per-batch mode the batch counter,
/// so the draw is reproducible and independent of model parameters.
inline TierGroupAssignment assign_groups(const std::vector<int>& ranking,
                                         const GroupingStrategy& s,
                                         std::uint64_t random_salt = 0) {
  const std::size_t n = ranking.size();
  TierGroupAssignment out;
  out.groups.resize(s.tiers);
  if (s.kind == GroupingKind::random) {
    std::vector<int> perm(n);
    std::iota(perm.begin(), perm.end(), 0);
    Rng rng(derive_seed(s.seed, random_salt));
    rng.shuffle(perm);
    for (std::size_t j = 0; j < s.tiers; ++j) {
      auto& g = out.groups[j];
      g.assign(perm.begin() + static_cast<std::ptrdiff_t>(j * s.group_size),
               perm.begin() + static_cast<std::ptrdiff_t>((j + 1) * s.group_size));
      std::sort(g.begin(), g.end());
    }
    return out;
  }
  for (std::size_t j = 0; j < s.tiers; ++j) {
    const std::size_t start = s.start_ranks[j], size = s.sizes[j];
    if (start + size - 1 > n)
      throw std::invalid_argument("assign_groups: tier " + std::to_string(j + 1) +
                                  " rank block [" + std::to_string(start) + ", " +
                                  std::to_string(start + size - 1) + "] out of range for " +
                                  std::to_string(n) + " experts");
    auto& g = out.groups[j];
    g.assign(ranking.begin() + static_cast<std::ptrdiff_t>(start - 1),
             ranking.begin() + static_cast<std::ptrdiff_t>(start - 1 + size));
    std::sort(g.begin(), g.end());
  }
  return out;
}

/// Resolve a scope keyword to concrete 1-based layer indices.
inline LayerScope resolve_layer_scope(ScopeKind kind, std::size_t num_layers,
                                      std::vector<std::size_t> explicit_layers = {}) {
  if (num_layers < 1) throw std::invalid_argument("resolve_layer_scope: no layers");
  LayerScope scope;
  scope.kind = kind;
  switch (kind) {
    case ScopeKind::full:
      for (std::size_t l = 1; l <= num_layers; ++l) scope.layers.push_back(l);
      break;
    case ScopeKind::shallow:
      for (std::size_t l = 1; l <= std::min<std::size_t>(4, num_layers); ++l)
        scope.layers.push_back(l);
      break;
    case ScopeKind::deep: {
      const std::size_t first = num_layers > 4 ? num_layers - 3 : 1;
      for (std::size_t l = first; l <= num_layers; ++l) scope.layers.push_back(l);
      break;
    }
    case ScopeKind::even: {
      const std::size_t q = (num_layers + 3) / 4;
      for (std::size_t k = 1; k <= 4; ++k)
        scope.layers.push_back(std::min(q * k, num_layers));
      std::sort(scope.layers.begin(), scope.layers.end());
      scope.layers.erase(std::unique(scope.layers.begin(), scope.layers.end()),
                         scope.layers.end());
      break;
    }
    case ScopeKind::explicit_set:
      for (std::size_t l : explicit_layers)
        if (l < 1 || l > num_layers)
          throw std::invalid_argument("resolve_layer_scope: layer " + std::to_string(l) +
                                      " outside 1.." + std::to_string(num_layers));
      scope.layers = std::move(explicit_layers);
      std::sort(scope.layers.begin(), scope.layers.end());
      scope.layers.erase(std::unique(scope.layers.begin(), scope.layers.end()),
                         scope.layers.end());
      break;
  }
  return scope;
}

/// Running mean of per-batch average router distributions, the grouping
/// basis in static_average mode. One instance per MoE layer. The window
/// counts batches including the one being grouped, so window=1 means each
/// batch is grouped by its own average distribution.
template <class Real>
struct RunningRouterMean {
  std::size_t window = 1;
  std::deque<std::vector<Real>> history;  // up to window-1 previous batches

  /// Mean over the retained history plus the current batch, without
  /// mutating state; usable from evaluation passes.
  std::vector<Real> mean_with(const std::vector<Real>& current) const {
    std::vector<Real> acc = current;
    for (const auto& h : history)
      for (std::size_t i = 0; i < acc.size(); ++i) acc[i] += h[i];
    const Real inv = Real(1) / static_cast<Real>(history.size() + 1);
    for (auto& v : acc) v *= inv;
    return acc;
  }

  void push(std::vector<Real> batch_mean) {
    if (window <= 1) return;
    history.push_back(std::move(batch_mean));
    while (history.size() > window - 1) history.pop_front();
  }
};

/// Batch-mean full softmax of detached router logits, row-major [T x n].
template <class Real>
std::vector<Real> detached_mean_softmax(const std::vector<Real>& logits, std::size_t t,
                                        std::size_t n) {
  std::vector<Real> acc(n, Real(0));
  for (std::size_t i = 0; i < t; ++i) {
    const Real* row = logits.data() + i * n;
    Real mx = row[0];
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, row[j]);
    Real denom = Real(0);
    std::vector<Real> e(n);
    for (std::size_t j = 0; j < n; ++j) {
      e[j] = std::exp(row[j] - mx);
      denom += e[j];
    }
    for (std::size_t j = 0; j < n; ++j) acc[j] += e[j] / denom;
  }
  const Real inv = Real(1) / static_cast<Real>(t);
  for (auto& v : acc) v *= inv;
  return acc;
}

}  // namespace ordmoe
