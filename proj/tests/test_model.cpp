#include <catch2/catch_amalgamated.hpp>

#include "ordmoe/dataset.hpp"
#include "ordmoe/model.hpp"
#include "ordmoe/training.hpp"

using namespace ordmoe;
using Catch::Matchers::ContainsSubstring;
using Catch::Matchers::WithinAbs;

namespace {

ModelConfig small_config(std::size_t tiers = 3) {
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
  m.rewards.rewards.clear();
  for (std::size_t j = 0; j < tiers; ++j)
    m.rewards.rewards.push_back(
        tiers == 1 ? 1.0
                   : static_cast<double>(tiers - 1 - j) / static_cast<double>(tiers - 1));
  m.seed = 5;
  m.validate();
  return m;
}

Batch small_batch(std::uint64_t seed = 7) {
  DatasetConfig dc;
  dc.prompt_len = 3;
  dc.data_vocab = 8;
  dc.train_size = 4;
  dc.eval_size = 2;
  dc.seed = seed;
  Dataset ds = generate_dataset(dc);
  Batch b;
  b.prompt_len = dc.prompt_len;
  b.seqs = {ds.train[0], ds.train[1]};
  return b;
}

}  // namespace

TEST_CASE("model config validation", "[model]") {
  auto m = small_config();
  REQUIRE_NOTHROW(m.validate());

  SECTION("heads must divide hidden") {
    m.heads = 3;
    REQUIRE_THROWS_WITH(m.validate(), ContainsSubstring("divisible"));
  }
  SECTION("reward count must match tiers") {
    m.rewards.rewards = {1.0, 0.0};
    REQUIRE_THROWS_WITH(m.validate(), ContainsSubstring("tiers"));
  }
  SECTION("grouping capacity") {
    m.grouping.tiers = 5;
    m.rewards.rewards = {4.0, 3.0, 2.0, 1.0, 0.0};
    REQUIRE_THROWS_AS(m.validate(), std::invalid_argument);
  }
}

TEST_CASE("initialization is seed-deterministic", "[model]") {
  auto cfg = small_config();
  auto a = init_model<double>(cfg, 42);
  auto b = init_model<double>(cfg, 42);
  auto c = init_model<double>(cfg, 43);

  auto na = a.named(), nb = b.named(), nc = c.named();
  REQUIRE(na.size() == 52);
  bool all_equal = true, any_diff = false;
  for (std::size_t i = 0; i < na.size(); ++i) {
    if (na[i].second.value() != nb[i].second.value()) all_equal = false;
    if (na[i].second.value() != nc[i].second.value()) any_diff = true;
  }
  REQUIRE(all_equal);
  REQUIRE(any_diff);
}

TEST_CASE("initialization: gains start at one, router bias at zero", "[model]") {
  auto cfg = small_config();
  auto p = init_model<double>(cfg, 1);
  for (const auto& [name, t] : p.named()) {
    if (name.find("gain") != std::string::npos)
      for (double v : t.value()) REQUIRE(v == 1.0);
    if (name.find("router.bias") != std::string::npos) {
      for (double v : t.value()) REQUIRE(v == 0.0);
      REQUIRE(t.requires_grad());
    }
  }

  cfg.router_bias = false;
  auto q = init_model<double>(cfg, 1);
  for (const auto& [name, t] : q.named())
    if (name.find("router.bias") != std::string::npos) REQUIRE_FALSE(t.requires_grad());
}

TEST_CASE("named parameter order is the documented layout", "[model]") {
  auto p = init_model<double>(small_config(), 1);
  auto named = p.named();
  REQUIRE(named[0].first == "token_embed");
  REQUIRE(named[1].first == "pos_embed");
  REQUIRE(named[2].first == "block0.attn_gain");
  REQUIRE(named[3].first == "block0.attn.wq");
  REQUIRE(named[7].first == "block0.moe_gain");
  REQUIRE(named[8].first == "block0.router.weight");
  REQUIRE(named[9].first == "block0.router.bias");
  REQUIRE(named[10].first == "block0.expert0.w1");
  REQUIRE(named[named.size() - 2].first == "final_gain");
  REQUIRE(named.back().first == "head");
}

TEST_CASE("response mask covers positions at and after the separator", "[model]") {
  REQUIRE(response_mask_for(6, 3) == std::vector<std::uint8_t>{0, 0, 0, 1, 1, 1});
  REQUIRE(batch_inputs({1, 2, 3, 4}) == std::vector<int>{1, 2, 3});
  REQUIRE(batch_targets({1, 2, 3, 4}) == std::vector<int>{2, 3, 4});
}

TEST_CASE("single-tier, zero-coefficient, and empty-scope runs reduce to plain",
          "[model]") {
  auto batch = small_batch();

  auto cfg1 = small_config(1);
  auto st1 = TrainState<double>::init(cfg1);
  auto plain = build_plain_objective(batch, st1.params);
  auto tiered1 = build_objective(batch, st1.params, 0, &st1.static_means, false);
  REQUIRE(tiered1.loss.total.item() == plain.loss.total.item());
  REQUIRE(tiered1.loss.erl.item() == 0.0);

  auto cfg0 = small_config(3);
  cfg0.lambda_erl = 0.0;
  cfg0.seed = cfg1.seed;
  auto st0 = TrainState<double>::init(cfg0);
  auto tiered0 = build_objective(batch, st0.params, 0, &st0.static_means, false);
  REQUIRE(tiered0.loss.total.item() == plain.loss.total.item());

  auto cfg_empty = small_config(3);
  cfg_empty.scope_kind = ScopeKind::explicit_set;
  cfg_empty.scope_layers.clear();
  cfg_empty.seed = cfg1.seed;
  REQUIRE_FALSE(cfg_empty.erl_active());
  auto st_empty = TrainState<double>::init(cfg_empty);
  auto tiered_empty =
      build_objective(batch, st_empty.params, 0, &st_empty.static_means, false);
  REQUIRE(tiered_empty.loss.total.item() == plain.loss.total.item());
  REQUIRE(tiered_empty.loss.erl.item() == 0.0);
}

TEST_CASE("tiered objective exposes one likelihood per tier", "[model]") {
  auto cfg = small_config(3);
  auto st = TrainState<double>::init(cfg);
  auto batch = small_batch();
  auto out = build_objective(batch, st.params, 11, &st.static_means, false);

  REQUIRE(out.forward.tier_avg.size() == 3);
  REQUIRE(out.loss.advantages.numel() == 3);
  for (const auto& t : out.forward.tier_avg) REQUIRE(std::isfinite(t.item()));
  REQUIRE(std::isfinite(out.loss.erl.item()));
  REQUIRE(out.loss.ntp.item() ==
          Catch::Approx(-out.forward.tier_avg[0].item()).epsilon(0).margin(0));
}

TEST_CASE("stop-gradient on lower tiers keeps values, changes gradients", "[model]") {
  auto batch = small_batch();
  auto cfg = small_config(3);

  auto grads_of = [&](bool stop) {
    ModelConfig c = cfg;
    c.stop_lower_tier_grad = stop;
    auto st = TrainState<double>::init(c);
    auto out = build_objective(batch, st.params, 3, &st.static_means, false);
    backward(out.loss.total);
    std::vector<double> g;
    for (const auto& [name, t] : st.params.named())
      if (!t.grad().empty())
        g.insert(g.end(), t.grad().begin(), t.grad().end());
    return std::pair(out.loss.erl.item(), g);
  };

  auto [erl_on, g_on] = grads_of(true);
  auto [erl_off, g_off] = grads_of(false);
  REQUIRE(erl_on == erl_off);
  REQUIRE(g_on != g_off);
}

TEST_CASE("greedy decode is deterministic and breaks ties toward low ids", "[model]") {
  auto cfg = small_config(3);
  auto st = TrainState<double>::init(cfg);
  std::vector<int> prompt = {3, 1, 4, 8};

  auto a = decode_tier(prompt, 3, 0, st.params, 77);
  auto b = decode_tier(prompt, 3, 0, st.params, 77);
  REQUIRE(a == b);
  REQUIRE(a.size() == 3);
  for (int tok : a) {
    REQUIRE(tok >= 0);
    REQUIRE(tok < 9);
  }

  Tensor<double> head = st.params.head;
  std::fill(head.value().begin(), head.value().end(), 0.0);
  auto ties = decode_tier(prompt, 3, 0, st.params, 77);
  REQUIRE(ties == std::vector<int>{0, 0, 0});
}

TEST_CASE("temperature sampling draws from the stream deterministically", "[model]") {
  auto cfg = small_config(3);
  auto st = TrainState<double>::init(cfg);
  std::vector<int> prompt = {3, 1, 4, 8};

  Rng s1(123), s2(123), s3(321);
  auto a = decode_tier(prompt, 3, 1, st.params, 9, 1.0, &s1);
  auto b = decode_tier(prompt, 3, 1, st.params, 9, 1.0, &s2);
  auto c = decode_tier(prompt, 3, 1, st.params, 9, 1.0, &s3);
  REQUIRE(a == b);
  for (int tok : c) {
    REQUIRE(tok >= 0);
    REQUIRE(tok < 9);
  }
}

TEST_CASE("sampled-rollout objective is reproducible from the sampler state",
          "[model]") {
  auto cfg = small_config(3);
  cfg.rollout = RolloutMode::sampled;
  cfg.rollout_temperature = 1.0;
  auto batch = small_batch();

  auto run = [&] {
    auto st = TrainState<double>::init(cfg);
    auto out = build_objective(batch, st.params, 5, &st.static_means, true, &st.rollout_rng);
    return std::tuple(out.loss.total.item(), out.loss.erl.item(),
                      out.forward.tier_avg.size());
  };
  auto [t1, e1, n1] = run();
  auto [t2, e2, n2] = run();
  REQUIRE(t1 == t2);
  REQUIRE(e1 == e2);
  REQUIRE(n1 == 1);  // follower tiers score their own rollouts, not the forward batch
  REQUIRE(n2 == 1);
  REQUIRE(std::isfinite(e1));
  REQUIRE(e1 != 0.0);
}

TEST_CASE("static grouping bases rankings on the batch-average router mix", "[model]") {
  auto cfg = small_config(3);
  cfg.grouping.mode = GroupingMode::static_average;
  cfg.grouping.window = 2;
  auto st = TrainState<double>::init(cfg);
  auto batch = small_batch();

  auto rankings =
      static_rankings_for_batch(batch, st.params, &st.static_means, /*update_means=*/false);
  REQUIRE(rankings.size() == cfg.num_layers);
  for (const auto& r : rankings) {
    REQUIRE(r.size() == cfg.num_experts);
    std::vector<int> sorted = r;
    std::sort(sorted.begin(), sorted.end());
    for (int i = 0; i < 8; ++i) REQUIRE(sorted[static_cast<std::size_t>(i)] == i);
  }

  auto again =
      static_rankings_for_batch(batch, st.params, &st.static_means, /*update_means=*/false);
  REQUIRE(rankings == again);

  auto out = build_objective(batch, st.params, 2, &st.static_means, true);
  REQUIRE(std::isfinite(out.loss.total.item()));
  REQUIRE(st.static_means[0].history.size() == 1);
}

TEST_CASE("overlong sequences are rejected", "[model]") {
  auto cfg = small_config(1);
  auto st = TrainState<double>::init(cfg);
  Batch batch;
  batch.prompt_len = 3;
  batch.seqs = {std::vector<int>(20, 1)};
  REQUIRE_THROWS_AS(build_plain_objective(batch, st.params), std::invalid_argument);
}

TEST_CASE("evaluation is read-only and reproducible", "[model]") {
  auto cfg = small_config(3);
  auto st = TrainState<double>::init(cfg);
  DatasetConfig dc;
  dc.prompt_len = 3;
  dc.data_vocab = 8;
  dc.train_size = 8;
  dc.eval_size = 6;
  Dataset ds = generate_dataset(dc);

  auto e1 = evaluate(st.params, ds.eval, dc.prompt_len, 2, 99, &st.static_means);
  auto e2 = evaluate(st.params, ds.eval, dc.prompt_len, 2, 99, &st.static_means);
  REQUIRE(e1.tier_avg == e2.tier_avg);
  REQUIRE(e1.separation == e2.separation);
  REQUIRE(e1.token_accuracy == e2.token_accuracy);
  REQUIRE(e1.batches == 3);
  REQUIRE(e1.load_counts.size() == cfg.num_layers);
}
