#include <catch2/catch_amalgamated.hpp>

#include "ordmoe/gradcheck.hpp"
#include "ordmoe/grouping.hpp"
#include "ordmoe/moe.hpp"
#include "ordmoe/rng.hpp"

using namespace ordmoe;
using Catch::Matchers::WithinAbs;
using T = Tensor<double>;

namespace {

MoeLayer<double> random_layer(std::size_t d, std::size_t h, std::size_t n, std::size_t k,
                              Rng& rng, bool grad = false) {
  MoeLayer<double> layer;
  layer.top_k = k;
  layer.router = {T::zeros({d, n}, grad), T::zeros({n}, grad)};
  for (auto& w : layer.router.weight.value()) w = rng.gaussian() * 0.5;
  for (std::size_t e = 0; e < n; ++e) {
    layer.experts.push_back({T::zeros({d, h}, grad), T::zeros({h, d}, grad)});
    for (auto& w : layer.experts.back().w1.value()) w = rng.gaussian() * 0.4;
    for (auto& w : layer.experts.back().w2.value()) w = rng.gaussian() * 0.4;
  }
  return layer;
}

T random_vec(std::size_t d, Rng& rng, bool grad = false) {
  auto x = T::zeros({d}, grad);
  for (auto& v : x.value()) v = rng.gaussian();
  return x;
}

}  // namespace

TEST_CASE("rank_by_score orders descending with low-id tie break", "[moe]") {
  const double scores[] = {0.5, 2.0, 1.0};
  REQUIRE(rank_by_score(scores, 3) == std::vector<int>{1, 2, 0});
  const double tied[] = {1.0, 3.0, 1.0, 3.0};
  REQUIRE(rank_by_score(tied, 4) == std::vector<int>{1, 3, 0, 2});
}

TEST_CASE("top_k_select picks the k best in ascending id order", "[moe]") {
  RoutingState<double> state;
  state.logits = T::from({4}, {0.5, 2.0, 1.0, -1.0});
  state.ranking = rank_by_score(state.logits.value().data(), 4);
  REQUIRE(top_k_select(state, 2) == std::vector<int>{1, 2});
  REQUIRE(top_k_select(state, 4) == std::vector<int>{0, 1, 2, 3});
  REQUIRE_THROWS_AS(top_k_select(state, 5), std::invalid_argument);
}

TEST_CASE("restricted_top_k keeps small candidate sets whole", "[moe]") {
  REQUIRE(restricted_top_k({4, 1, 6, 0}, {6, 1}, 2) == std::vector<int>{1, 6});
  REQUIRE(restricted_top_k({4, 1, 6, 0}, {6}, 2) == std::vector<int>{6});
  REQUIRE(restricted_top_k({4, 1, 6, 0, 3}, {0, 3, 6}, 2) == std::vector<int>{0, 6});
  REQUIRE_THROWS_AS(restricted_top_k({1, 0}, {}, 1), std::invalid_argument);
}

TEST_CASE("gate weights renormalize within the selected set", "[moe]") {
  RoutingState<double> state;
  state.logits = T::from({3}, {2.0, 1.0, 0.0});
  state.ranking = rank_by_score(state.logits.value().data(), 3);
  auto g = gate_weights(state, {0, 1});
  REQUIRE_THAT(g.value()[0], WithinAbs(0.7310585786300049, 1e-15));
  REQUIRE_THAT(g.value()[1], WithinAbs(0.2689414213699951, 1e-15));
  REQUIRE(g.value()[2] == 0.0);
}

TEST_CASE("random tokens: tier gates sum to one, exact zero off-tier", "[moe]") {
  Rng rng(3);
  const std::size_t d = 8, n = 8, k = 2;
  auto layer = random_layer(d, 4, n, k, rng);
  GroupingStrategy strat;
  strat.tiers = 3;
  strat.group_size = k;
  strat = resolve_strategy(strat, n);
  double worst_sum = 0.0;
  for (int trial = 0; trial < 1000; ++trial) {
    auto x = random_vec(d, rng);
    auto state = route(x, layer.router);
    auto groups = assign_groups(state.ranking, strat, static_cast<std::uint64_t>(trial));
    for (const auto& group : groups.groups) {
      auto g = gate_weights(state, group);
      double sum = 0.0;
      std::vector<bool> in(n, false);
      for (int e : group) in[static_cast<std::size_t>(e)] = true;
      for (std::size_t e = 0; e < n; ++e) {
        if (in[e]) sum += g.value()[e];
        else REQUIRE(g.value()[e] == 0.0);
      }
      worst_sum = std::max(worst_sum, std::abs(sum - 1.0));
    }
  }
  REQUIRE(worst_sum < 1e-12);
}

TEST_CASE("tier-1 restricted forward is bitwise the plain top-k forward", "[moe]") {
  Rng rng(5);
  const std::size_t d = 8, n = 8, k = 2;
  auto layer = random_layer(d, 4, n, k, rng);
  GroupingStrategy strat;
  strat.tiers = 3;
  strat.group_size = k;
  strat = resolve_strategy(strat, n);
  for (int trial = 0; trial < 300; ++trial) {
    auto x = random_vec(d, rng);
    auto state = route(x, layer.router);
    auto groups = assign_groups(state.ranking, strat, 0);
    auto sel = top_k_select(state, k);
    REQUIRE(groups.groups[0] == sel);
    auto y_plain = moe_forward(x, gate_weights(state, sel), layer);
    auto y_tier1 = tier_restricted_forward(x, groups.groups[0], state, layer);
    REQUIRE(y_plain.value() == y_tier1.value());
  }
}

TEST_CASE("moe forward gradients pass finite differences", "[moe]") {
  Rng rng(13);
  const std::size_t d = 5, n = 4, k = 2;
  auto layer = random_layer(d, 3, n, k, rng, /*grad=*/true);
  auto x = random_vec(d, rng, /*grad=*/true);
  auto target = random_vec(d, rng);

  auto loss_fn = [&] {
    auto state = route(x, layer.router);
    auto sel = top_k_select(state, k);
    auto y = moe_forward(x, gate_weights(state, sel), layer);
    auto err = sub(y, target);
    return mean(mul(err, err));
  };
  std::vector<std::pair<std::string, T>> params = {
      {"x", x}, {"router.weight", layer.router.weight}, {"router.bias", layer.router.bias}};
  for (std::size_t e = 0; e < n; ++e) {
    params.emplace_back("expert" + std::to_string(e) + ".w1", layer.experts[e].w1);
    params.emplace_back("expert" + std::to_string(e) + ".w2", layer.experts[e].w2);
  }
  auto report = finite_diff_check<double>(params, loss_fn);
  INFO(report.to_string());
  REQUIRE(report.pass);
}

TEST_CASE("batched dispatch matches the single-token path", "[moe]") {
  Rng rng(21);
  const std::size_t d = 6, n = 8, k = 2, t = 7;
  auto layer = random_layer(d, 4, n, k, rng);
  auto rows = T::zeros({t, d});
  for (auto& v : rows.value()) v = rng.gaussian();

  auto logits = route_rows(rows, layer.router);
  std::vector<std::vector<int>> sets;
  for (std::size_t i = 0; i < t; ++i) {
    RoutingState<double> state;
    state.logits = row(logits, i);
    state.ranking = rank_by_score(state.logits.value().data(), n);
    sets.push_back(top_k_select(state, k));
  }
  auto batched = moe_forward_rows(rows, logits, layer, sets);
  for (std::size_t i = 0; i < t; ++i) {
    auto xi = T::from({d}, std::vector<double>(rows.value().begin() + i * d,
                                               rows.value().begin() + (i + 1) * d));
    auto state = route(xi, layer.router);
    auto yi = moe_forward(xi, gate_weights(state, sets[i]), layer);
    for (std::size_t j = 0; j < d; ++j)
      REQUIRE(batched.value()[i * d + j] == yi.value()[j]);
  }
}

TEST_CASE("routing rejects non-finite inputs", "[moe]") {
  Rng rng(2);
  auto layer = random_layer(4, 3, 4, 2, rng);
  auto x = T::zeros({4});
  x.value()[1] = std::numeric_limits<double>::infinity();
  REQUIRE_THROWS_AS(route(x, layer.router), numeric_error);
}

TEST_CASE("empty gate support is rejected", "[moe]") {
  RoutingState<double> state;
  state.logits = T::from({2}, {1.0, 0.0});
  state.ranking = {0, 1};
  REQUIRE_THROWS_AS(gate_weights(state, {}), std::invalid_argument);
}
