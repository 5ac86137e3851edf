#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "ordmoe/common.hpp"
#include "ordmoe/rng.hpp"

namespace ordmoe {

enum class Task { copy, reverse, modadd };

inline const char* task_name(Task t) {
  switch (t) {
    case Task::copy: return "copy";
    case Task::reverse: return "reverse";
    case Task::modadd: return "modadd";
  }
  return "?";
}

inline Task task_from_name(const std::string& s) {
  if (s == "copy") return Task::copy;
  if (s == "reverse") return Task::reverse;
  if (s == "modadd") return Task::modadd;
  throw config_error("task: unknown task '" + s + "' (expected copy, reverse, or modadd)");
}

struct DatasetConfig {
  Task task = Task::copy;
  std::size_t prompt_len = 6;
  std::size_t data_vocab = 16;  // prompt tokens are 0..data_vocab-1
  std::size_t train_size = 512;
  std::size_t eval_size = 64;
  std::uint64_t seed = 7;
};

/// Synthetic sequence-to-sequence data. Every sequence is
/// prompt tokens, the separator token (id = data_vocab), response tokens.
/// Prompts are sampled without repetition, so train and eval are disjoint
/// by construction.
struct Dataset {
  DatasetConfig config;
  std::vector<std::vector<int>> train;
  std::vector<std::vector<int>> eval;

  int sep_token() const { return static_cast<int>(config.data_vocab); }
  std::size_t vocab_size() const { return config.data_vocab + 1; }
  std::size_t response_len() const {
    return config.task == Task::modadd ? 1 : config.prompt_len;
  }
  std::size_t seq_len() const { return config.prompt_len + 1 + response_len(); }
};

inline std::vector<int> task_response(Task task, const std::vector<int>& prompt,
                                      std::size_t data_vocab) {
  switch (task) {
    case Task::copy:
      return prompt;
    case Task::reverse: {
      std::vector<int> r(prompt.rbegin(), prompt.rend());
      return r;
    }
    case Task::modadd: {
      long long sum = 0;
      for (int t : prompt) sum += t;
      return {static_cast<int>(sum % static_cast<long long>(data_vocab))};
    }
  }
  return {};
}

/// Deterministic generation: one stream draws distinct prompts in order,
/// the first train_size feed the training split, the rest the eval split.
inline Dataset generate_dataset(const DatasetConfig& cfg) {
  if (cfg.prompt_len < 1) throw config_error("dataset: prompt_len must be >= 1");
  if (cfg.data_vocab < 2) throw config_error("dataset: data_vocab must be >= 2");
  if (cfg.train_size < 1 || cfg.eval_size < 1)
    throw config_error("dataset: train and eval sizes must be >= 1");

  const std::size_t total = cfg.train_size + cfg.eval_size;
  Rng rng(cfg.seed);
  std::set<std::vector<int>> seen;
  Dataset ds;
  ds.config = cfg;
  std::size_t attempts = 0;
  const std::size_t max_attempts = 100 * total + 1000;
  while (seen.size() < total) {
    if (++attempts > max_attempts)
      throw config_error("dataset: cannot draw " + std::to_string(total) +
                         " distinct prompts of length " + std::to_string(cfg.prompt_len) +
                         " from vocab " + std::to_string(cfg.data_vocab));
    std::vector<int> prompt(cfg.prompt_len);
    for (auto& t : prompt) t = static_cast<int>(rng.uniform_below(cfg.data_vocab));
    if (!seen.insert(prompt).second) continue;
    std::vector<int> seq = prompt;
    seq.push_back(static_cast<int>(cfg.data_vocab));
    const auto resp = task_response(cfg.task, prompt, cfg.data_vocab);
    seq.insert(seq.end(), resp.begin(), resp.end());
    if (ds.train.size() < cfg.train_size)
      ds.train.push_back(std::move(seq));
    else
      ds.eval.push_back(std::move(seq));
  }
  return ds;
}

/// Plain-text format: a comment header describing the generation recipe,
/// then one space-separated token-id sequence per line.
inline void write_sequences(const std::string& path, const Dataset& ds,
                            const std::vector<std::vector<int>>& seqs) {
  std::ofstream os(path, std::ios::trunc);
  if (!os) throw config_error("dataset: cannot open for writing: " + path);
  os << "# task=" << task_name(ds.config.task) << " prompt_len=" << ds.config.prompt_len
     << " data_vocab=" << ds.config.data_vocab << " sep=" << ds.sep_token()
     << " seed=" << ds.config.seed << " size=" << seqs.size() << "\n";
  for (const auto& seq : seqs) {
    for (std::size_t i = 0; i < seq.size(); ++i) os << (i ? " " : "") << seq[i];
    os << "\n";
  }
  if (!os) throw config_error("dataset: write failed: " + path);
}

inline std::vector<std::vector<int>> read_sequences(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw config_error("dataset: cannot open: " + path);
  std::vector<std::vector<int>> seqs;
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    std::vector<int> seq;
    int tok;
    while (ls >> tok) seq.push_back(tok);
    if (!seq.empty()) seqs.push_back(std::move(seq));
  }
  return seqs;
}

}  // namespace ordmoe
