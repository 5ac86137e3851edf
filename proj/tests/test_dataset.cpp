#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "ordmoe/dataset.hpp"

using namespace ordmoe;
using Catch::Matchers::ContainsSubstring;

TEST_CASE("copy task mirrors the prompt after the separator", "[dataset]") {
  DatasetConfig dc;
  dc.task = Task::copy;
  dc.prompt_len = 4;
  dc.data_vocab = 8;
  dc.train_size = 20;
  dc.eval_size = 5;
  Dataset ds = generate_dataset(dc);

  REQUIRE(ds.train.size() == 20);
  REQUIRE(ds.eval.size() == 5);
  REQUIRE(ds.sep_token() == 8);
  REQUIRE(ds.vocab_size() == 9);
  REQUIRE(ds.seq_len() == 9);

  for (const auto& seq : ds.train) {
    REQUIRE(seq.size() == 9);
    REQUIRE(seq[4] == 8);
    for (std::size_t i = 0; i < 4; ++i) {
      REQUIRE(seq[i] >= 0);
      REQUIRE(seq[i] < 8);
      REQUIRE(seq[5 + i] == seq[i]);
    }
  }
}

TEST_CASE("reverse task emits the prompt backwards", "[dataset]") {
  DatasetConfig dc;
  dc.task = Task::reverse;
  dc.prompt_len = 5;
  dc.data_vocab = 6;
  dc.train_size = 12;
  dc.eval_size = 3;
  Dataset ds = generate_dataset(dc);

  for (const auto& seq : ds.eval) {
    REQUIRE(seq.size() == 11);
    for (std::size_t i = 0; i < 5; ++i) REQUIRE(seq[6 + i] == seq[4 - i]);
  }
}

TEST_CASE("modadd task answers with the prompt sum modulo the vocabulary",
          "[dataset]") {
  DatasetConfig dc;
  dc.task = Task::modadd;
  dc.prompt_len = 4;
  dc.data_vocab = 7;
  dc.train_size = 10;
  dc.eval_size = 4;
  Dataset ds = generate_dataset(dc);

  REQUIRE(ds.response_len() == 1);
  for (const auto& seq : ds.train) {
    REQUIRE(seq.size() == 6);
    int sum = 0;
    for (std::size_t i = 0; i < 4; ++i) sum += seq[i];
    REQUIRE(seq[5] == sum % 7);
  }
}

TEST_CASE("train and eval prompts never overlap", "[dataset]") {
  DatasetConfig dc;
  dc.prompt_len = 3;
  dc.data_vocab = 4;
  dc.train_size = 40;
  dc.eval_size = 20;
  Dataset ds = generate_dataset(dc);

  auto prompt_of = [&](const std::vector<int>& seq) {
    return std::vector<int>(seq.begin(), seq.begin() + 3);
  };
  std::set<std::vector<int>> train_prompts;
  for (const auto& s : ds.train) train_prompts.insert(prompt_of(s));
  REQUIRE(train_prompts.size() == 40);
  for (const auto& s : ds.eval) REQUIRE(train_prompts.count(prompt_of(s)) == 0);
}

TEST_CASE("generation is a pure function of the config", "[dataset]") {
  DatasetConfig dc;
  dc.prompt_len = 4;
  dc.data_vocab = 9;
  dc.train_size = 15;
  dc.eval_size = 5;
  dc.seed = 123;
  Dataset a = generate_dataset(dc);
  Dataset b = generate_dataset(dc);
  REQUIRE(a.train == b.train);
  REQUIRE(a.eval == b.eval);

  dc.seed = 124;
  Dataset c = generate_dataset(dc);
  REQUIRE(a.train != c.train);
}

TEST_CASE("impossible draws are reported instead of spinning", "[dataset]") {
  DatasetConfig dc;
  dc.prompt_len = 2;
  dc.data_vocab = 2;
  dc.train_size = 10;
  dc.eval_size = 2;
  REQUIRE_THROWS_MATCHES(generate_dataset(dc), config_error,
                         Catch::Matchers::MessageMatches(ContainsSubstring("distinct")));

  dc.data_vocab = 1;
  REQUIRE_THROWS_AS(generate_dataset(dc), config_error);
}

TEST_CASE("sequence files round-trip through the text format", "[dataset]") {
  DatasetConfig dc;
  dc.prompt_len = 3;
  dc.data_vocab = 5;
  dc.train_size = 8;
  dc.eval_size = 4;
  Dataset ds = generate_dataset(dc);

  const auto path =
      (std::filesystem::temp_directory_path() / "ordmoe_dataset_rt.txt").string();
  write_sequences(path, ds, ds.train);

  std::ifstream is(path);
  std::string header;
  std::getline(is, header);
  REQUIRE(header.rfind("# ", 0) == 0);
  REQUIRE_THAT(header, ContainsSubstring("task=copy"));
  REQUIRE_THAT(header, ContainsSubstring("sep=5"));
  is.close();

  REQUIRE(read_sequences(path) == ds.train);
  std::remove(path.c_str());

  REQUIRE_THROWS_AS(read_sequences("/nonexistent/ordmoe.txt"), config_error);
}

TEST_CASE("task names resolve both directions", "[dataset]") {
  REQUIRE(task_from_name("copy") == Task::copy);
  REQUIRE(task_from_name("reverse") == Task::reverse);
  REQUIRE(task_from_name("modadd") == Task::modadd);
  REQUIRE(std::string(task_name(Task::reverse)) == "reverse");
  REQUIRE_THROWS_MATCHES(task_from_name("sort"), config_error,
                         Catch::Matchers::MessageMatches(ContainsSubstring("sort")));
}
