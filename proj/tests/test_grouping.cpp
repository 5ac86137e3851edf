#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "ordmoe/grouping.hpp"
#include "ordmoe/moe.hpp"
#include "ordmoe/rng.hpp"

using namespace ordmoe;
using Catch::Matchers::ContainsSubstring;

TEST_CASE("default_block_positions reproduces the published anchors", "[grouping]") {
  REQUIRE(default_block_positions(64, 6, 3) == std::vector<std::size_t>{1, 25, 59});
  REQUIRE(default_block_positions(256, 8, 3) == std::vector<std::size_t>{1, 121, 249});
  REQUIRE(default_block_positions(16, 2, 3) == std::vector<std::size_t>{1, 7, 15});
  REQUIRE(default_block_positions(8, 2, 3) == std::vector<std::size_t>{1, 3, 7});
  REQUIRE(default_block_positions(16, 2, 4) == std::vector<std::size_t>{1, 5, 9, 15});
}

TEST_CASE("block positions: edge tier counts", "[grouping]") {
  REQUIRE(default_block_positions(8, 2, 1) == std::vector<std::size_t>{1});
  REQUIRE(default_block_positions(64, 6, 2) == std::vector<std::size_t>{1, 59});
  REQUIRE_THROWS_AS(default_block_positions(16, 2, 9), std::invalid_argument);
  REQUIRE_THROWS_AS(default_block_positions(8, 0, 2), std::invalid_argument);
}

TEST_CASE("block positions always span rank 1 to rank n", "[grouping]") {
  for (std::size_t n : {8u, 16u, 32u, 64u}) {
    for (std::size_t k : {1u, 2u, 4u}) {
      for (std::size_t c = 2; c * k <= n; ++c) {
        auto starts = default_block_positions(n, k, c);
        REQUIRE(starts.front() == 1);
        REQUIRE(starts.back() == n - k + 1);
        for (std::size_t j = 1; j < starts.size(); ++j)
          REQUIRE(starts[j] >= starts[j - 1] + k);
      }
    }
  }
}

TEST_CASE("assign_groups slices rank blocks out of the ranking", "[grouping]") {
  // Scores chosen so the descending ranking is experts 4,1,6,0,7,2,5,3.
  const double scores[] = {5.0, 7.0, 3.0, 1.0, 8.0, 2.0, 6.0, 4.0};
  auto ranking = rank_by_score(scores, 8);
  REQUIRE(ranking == std::vector<int>{4, 1, 6, 0, 7, 2, 5, 3});

  GroupingStrategy strat;
  strat.tiers = 3;
  strat.group_size = 2;
  strat = resolve_strategy(strat, 8);
  REQUIRE(strat.start_ranks == std::vector<std::size_t>{1, 3, 7});

  auto groups = assign_groups(ranking, strat);
  REQUIRE(groups.groups[0] == std::vector<int>{1, 4});
  REQUIRE(groups.groups[1] == std::vector<int>{0, 6});
  REQUIRE(groups.groups[2] == std::vector<int>{3, 5});
}

TEST_CASE("high_only packs tiers from the top ranks", "[grouping]") {
  GroupingStrategy strat;
  strat.kind = GroupingKind::high_only;
  strat.tiers = 3;
  strat.group_size = 2;
  strat = resolve_strategy(strat, 8);
  REQUIRE(strat.start_ranks == std::vector<std::size_t>{1, 3, 5});

  const double scores[] = {5.0, 7.0, 3.0, 1.0, 8.0, 2.0, 6.0, 4.0};
  auto groups = assign_groups(rank_by_score(scores, 8), strat);
  REQUIRE(groups.groups[0] == std::vector<int>{1, 4});
  REQUIRE(groups.groups[1] == std::vector<int>{0, 6});
  REQUIRE(groups.groups[2] == std::vector<int>{2, 7});
}

TEST_CASE("random grouping ignores the ranking and partitions by salt", "[grouping]") {
  GroupingStrategy strat;
  strat.kind = GroupingKind::random;
  strat.tiers = 3;
  strat.group_size = 2;
  strat.seed = 99;
  strat = resolve_strategy(strat, 8);

  std::vector<int> ranking_a{4, 1, 6, 0, 7, 2, 5, 3};
  std::vector<int> ranking_b{0, 1, 2, 3, 4, 5, 6, 7};
  auto ga = assign_groups(ranking_a, strat, 5);
  auto gb = assign_groups(ranking_b, strat, 5);
  REQUIRE(ga.groups == gb.groups);

  auto gc = assign_groups(ranking_a, strat, 6);
  REQUIRE(ga.groups != gc.groups);

  std::set<int> seen;
  for (const auto& g : ga.groups) {
    REQUIRE(g.size() == 2);
    for (int e : g) {
      REQUIRE(seen.insert(e).second);
      REQUIRE(e >= 0);
      REQUIRE(e < 8);
    }
  }
}

TEST_CASE("uneven grouping requires explicit geometry and validates it", "[grouping]") {
  GroupingStrategy strat;
  strat.kind = GroupingKind::uneven;
  strat.tiers = 3;
  REQUIRE_THROWS_WITH(resolve_strategy(strat, 16), ContainsSubstring("explicit sizes"));

  strat.sizes = {4, 2, 2};
  strat.start_ranks = {1, 8, 15};
  auto resolved = resolve_strategy(strat, 16);

  std::vector<int> ranking(16);
  for (int i = 0; i < 16; ++i) ranking[static_cast<std::size_t>(i)] = 15 - i;
  auto groups = assign_groups(ranking, resolved);
  REQUIRE(groups.groups[0] == std::vector<int>{12, 13, 14, 15});
  REQUIRE(groups.groups[1] == std::vector<int>{7, 8});
  REQUIRE(groups.groups[2] == std::vector<int>{0, 1});

  strat.start_ranks = {1, 4, 15};  // tier 2 overlaps tier 1
  REQUIRE_THROWS_AS(resolve_strategy(strat, 16), std::invalid_argument);
}

TEST_CASE("uniform grouping must anchor the top and bottom blocks", "[grouping]") {
  GroupingStrategy strat;
  strat.tiers = 2;
  strat.group_size = 2;
  strat.start_ranks = {2, 7};
  strat.sizes = {2, 2};
  REQUIRE_THROWS_WITH(resolve_strategy(strat, 8), ContainsSubstring("top block"));
  strat.start_ranks = {1, 5};
  REQUIRE_THROWS_WITH(resolve_strategy(strat, 8), ContainsSubstring("bottom"));
  strat.start_ranks = {1, 7};
  REQUIRE_NOTHROW(resolve_strategy(strat, 8));
}

TEST_CASE("layer scopes resolve to 1-based layer sets", "[grouping]") {
  REQUIRE(resolve_layer_scope(ScopeKind::full, 2).layers == std::vector<std::size_t>{1, 2});
  REQUIRE(resolve_layer_scope(ScopeKind::shallow, 6).layers ==
          std::vector<std::size_t>{1, 2, 3, 4});
  REQUIRE(resolve_layer_scope(ScopeKind::shallow, 3).layers ==
          std::vector<std::size_t>{1, 2, 3});
  REQUIRE(resolve_layer_scope(ScopeKind::deep, 6).layers ==
          std::vector<std::size_t>{3, 4, 5, 6});
  REQUIRE(resolve_layer_scope(ScopeKind::deep, 28).layers ==
          std::vector<std::size_t>{25, 26, 27, 28});
  REQUIRE(resolve_layer_scope(ScopeKind::even, 28).layers ==
          std::vector<std::size_t>{7, 14, 21, 28});
  REQUIRE(resolve_layer_scope(ScopeKind::even, 3).layers ==
          std::vector<std::size_t>{1, 2, 3});
  REQUIRE(resolve_layer_scope(ScopeKind::explicit_set, 8, {2, 5}).layers ==
          std::vector<std::size_t>{2, 5});
  REQUIRE(resolve_layer_scope(ScopeKind::explicit_set, 8, {}).layers.empty());
  REQUIRE_THROWS_AS(resolve_layer_scope(ScopeKind::explicit_set, 8, {9}),
                    std::invalid_argument);

  auto scope = resolve_layer_scope(ScopeKind::even, 28);
  REQUIRE(scope.contains(14));
  REQUIRE_FALSE(scope.contains(13));
}

TEST_CASE("running router mean windows include the current batch", "[grouping]") {
  RunningRouterMean<double> m{3, {}};
  std::vector<double> b1{1.0, 0.0}, b2{0.0, 1.0}, b3{0.5, 0.5}, b4{1.0, 1.0};

  REQUIRE(m.mean_with(b1) == b1);
  m.push(b1);
  REQUIRE(m.mean_with(b2) == std::vector<double>{0.5, 0.5});
  m.push(b2);
  m.push(b3);
  auto w = m.mean_with(b4);  // window holds b2, b3 plus current b4
  REQUIRE_THAT(w[0], Catch::Matchers::WithinAbs(0.5, 1e-15));
  REQUIRE_THAT(w[1], Catch::Matchers::WithinAbs(2.5 / 3.0, 1e-15));

  RunningRouterMean<double> single{1, {}};
  single.push(b1);
  REQUIRE(single.mean_with(b2) == b2);
}
