#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "ordmoe/checkpoint.hpp"
#include "ordmoe/dataset.hpp"

using namespace ordmoe;
using Catch::Matchers::ContainsSubstring;

namespace {

ModelConfig ckpt_config() {
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
  m.grouping.mode = GroupingMode::static_average;
  m.grouping.window = 3;
  m.rewards.rewards = {1.0, 0.5, 0.0};
  m.seed = 33;
  m.validate();
  return m;
}

std::string temp_path(const std::string& stem) {
  return (std::filesystem::temp_directory_path() / stem).string();
}

}  // namespace

TEST_CASE("checkpoint round trip resumes the exact trajectory", "[checkpoint]") {
  auto cfg = ckpt_config();
  DatasetConfig dc;
  dc.prompt_len = 3;
  dc.data_vocab = 8;
  dc.train_size = 16;
  dc.eval_size = 4;
  Dataset ds = generate_dataset(dc);
  OptimizerConfig opt;
  opt.total_steps = 40;

  auto st = TrainState<double>::init(cfg);
  for (int i = 0; i < 3; ++i) {
    auto batch = sample_batch(st, ds.train, dc.prompt_len, 4);
    train_step(st, batch, opt);
  }

  const std::string path = temp_path("ordmoe_ckpt_roundtrip.bin");
  save_checkpoint(path, st);
  const auto rng_at_save = st.train_rng.state().words;
  const auto means_at_save = st.static_means[0].history;

  std::vector<double> ahead;
  std::vector<std::vector<std::vector<int>>> drawn;
  for (int i = 0; i < 2; ++i) {
    auto batch = sample_batch(st, ds.train, dc.prompt_len, 4);
    drawn.push_back(batch.seqs);
    ahead.push_back(train_step(st, batch, opt).total.item());
  }

  auto re = TrainState<double>::init(cfg);
  load_checkpoint(path, re);
  REQUIRE(re.step == 3);
  REQUIRE(re.train_rng.state().words == rng_at_save);
  REQUIRE(re.static_means[0].history == means_at_save);

  for (int i = 0; i < 2; ++i) {
    auto batch = sample_batch(re, ds.train, dc.prompt_len, 4);
    REQUIRE(batch.seqs == drawn[static_cast<std::size_t>(i)]);
    REQUIRE(train_step(re, batch, opt).total.item() == ahead[static_cast<std::size_t>(i)]);
  }

  auto a = st.params.named();
  auto b = re.params.named();
  for (std::size_t i = 0; i < a.size(); ++i) {
    REQUIRE(a[i].second.value() == b[i].second.value());
    REQUIRE(st.m[i] == re.m[i]);
    REQUIRE(st.v[i] == re.v[i]);
  }
  std::remove(path.c_str());
}

TEST_CASE("checkpoints refuse mismatched model shapes", "[checkpoint]") {
  auto cfg = ckpt_config();
  auto st = TrainState<double>::init(cfg);
  const std::string path = temp_path("ordmoe_ckpt_digest.bin");
  save_checkpoint(path, st);

  auto other_cfg = ckpt_config();
  other_cfg.num_experts = 4;
  other_cfg.grouping.tiers = 2;
  other_cfg.rewards.rewards = {1.0, 0.0};
  other_cfg.validate();
  auto other = TrainState<double>::init(other_cfg);
  REQUIRE_THROWS_MATCHES(load_checkpoint(path, other), config_error,
                         Catch::Matchers::MessageMatches(ContainsSubstring("digest")));
  std::remove(path.c_str());
}

TEST_CASE("truncated checkpoints are rejected", "[checkpoint]") {
  auto cfg = ckpt_config();
  auto st = TrainState<double>::init(cfg);
  const std::string path = temp_path("ordmoe_ckpt_trunc.bin");
  save_checkpoint(path, st);

  const auto full = std::filesystem::file_size(path);
  std::filesystem::resize_file(path, full / 2);
  auto re = TrainState<double>::init(cfg);
  REQUIRE_THROWS_AS(load_checkpoint(path, re), config_error);

  std::filesystem::resize_file(path, 4);
  REQUIRE_THROWS_AS(load_checkpoint(path, re), config_error);
  std::remove(path.c_str());
}

TEST_CASE("a foreign file is not a checkpoint", "[checkpoint]") {
  const std::string path = temp_path("ordmoe_ckpt_magic.bin");
  {
    std::ofstream os(path, std::ios::binary);
    os << "definitely not a checkpoint, padded out for good measure............";
  }
  auto st = TrainState<double>::init(ckpt_config());
  REQUIRE_THROWS_MATCHES(load_checkpoint(path, st), config_error,
                         Catch::Matchers::MessageMatches(ContainsSubstring("magic")));
  std::remove(path.c_str());

  REQUIRE_THROWS_MATCHES(load_checkpoint(temp_path("ordmoe_ckpt_missing.bin"), st),
                         config_error,
                         Catch::Matchers::MessageMatches(ContainsSubstring("open")));
}

TEST_CASE("missing end marker is detected", "[checkpoint]") {
  auto cfg = ckpt_config();
  auto st = TrainState<double>::init(cfg);
  const std::string path = temp_path("ordmoe_ckpt_end.bin");
  save_checkpoint(path, st);
  std::filesystem::resize_file(path, std::filesystem::file_size(path) - 1);
  auto re = TrainState<double>::init(cfg);
  REQUIRE_THROWS_MATCHES(load_checkpoint(path, re), config_error,
                         Catch::Matchers::MessageMatches(ContainsSubstring("end marker")));
  std::remove(path.c_str());
}
