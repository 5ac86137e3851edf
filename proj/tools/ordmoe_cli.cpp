#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "ordmoe/experiment.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitVerifyFailure = 1;
constexpr int kExitConfigError = 2;
constexpr int kExitNumericAbort = 3;

struct RunArgs {
  std::string config_path;
  std::string out_override;
  std::int64_t seed_override = -1;
  std::int64_t steps_override = -1;
};

int cmd_run(const RunArgs& args) {
  ordmoe::ExperimentConfig cfg = ordmoe::load_experiment_config(args.config_path);
  ordmoe::json overrides = ordmoe::json::object();
  if (!args.out_override.empty()) {
    cfg.out_dir = args.out_override;
    overrides["out"] = args.out_override;
  }
  if (args.seed_override >= 0) {
    cfg.model.seed = static_cast<std::uint64_t>(args.seed_override);
    overrides["seed"] = args.seed_override;
  }
  if (args.steps_override >= 0) {
    if (args.steps_override < 1)
      throw ordmoe::config_error("--steps: must be >= 1");
    cfg.train.steps = static_cast<std::size_t>(args.steps_override);
    cfg.train.opt.total_steps = cfg.train.steps;
    overrides["steps"] = args.steps_override;
  }

  const std::string dir = ordmoe::resolve_out_dir(cfg.out_dir);
  std::filesystem::create_directories(dir);
  {
    std::ofstream os(dir + "/invocation.json");
    os << ordmoe::json{{"config", args.config_path}, {"overrides", overrides}}.dump(2)
       << '\n';
  }

  if (cfg.axis != ordmoe::AblationAxis::none) {
    auto runs = ordmoe::run_ablation<double>(cfg, std::cout);
    std::cout << "completed " << runs.size() << " sub-runs under " << dir << '\n';
  } else {
    auto summary = ordmoe::run_experiment<double>(cfg, std::cout);
    std::cout << "completed " << summary.steps_done << " steps; outputs in " << summary.dir
              << '\n';
  }
  return kExitOk;
}

int cmd_verify(const std::string& which, std::size_t coords) {
  bool ok = true;
  if (which == "gradcheck" || which == "all") {
    std::cout << "== gradient checks ==\n";
    ok = ordmoe::verify_gradcheck(coords, std::cout).all_pass() && ok;
  }
  if (which == "invariants" || which == "all") {
    std::cout << "== invariants ==\n";
    ok = ordmoe::verify_invariants(std::cout).all_pass() && ok;
  }
  return ok ? kExitOk : kExitVerifyFailure;
}

int cmd_gen_data(const std::string& task, std::size_t size, std::size_t eval_size,
                 std::uint64_t seed, std::size_t prompt_len, std::size_t data_vocab,
                 const std::string& out) {
  if (size < 1) throw ordmoe::config_error("gen-data: --size must be >= 1");
  ordmoe::DatasetConfig dc;
  dc.task = ordmoe::task_from_name(task);
  dc.prompt_len = prompt_len;
  dc.data_vocab = data_vocab;
  dc.train_size = size;
  dc.eval_size = eval_size;
  dc.seed = seed;
  ordmoe::Dataset ds = ordmoe::generate_dataset(dc);
  const std::string dir = ordmoe::resolve_out_dir(out);
  std::filesystem::create_directories(dir);
  ordmoe::write_sequences(dir + "/train.txt", ds, ds.train);
  ordmoe::write_sequences(dir + "/eval.txt", ds, ds.eval);
  std::cout << "wrote " << ds.train.size() << " train and " << ds.eval.size()
            << " eval sequences to " << dir << '\n';
  return kExitOk;
}

int cmd_report(const std::string& in) {
  std::string path = in;
  if (std::filesystem::is_directory(path)) path += "/metrics.jsonl";
  auto records = ordmoe::read_metrics(path);
  std::cout << ordmoe::format_metrics_table(records);
  std::cout << records.size() << " eval points from " << path << '\n';
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{
      "Training, verification, and reporting harness for tier-restricted sparse "
      "mixture-of-experts language models"};
  app.require_subcommand(1);

  RunArgs run_args;
  auto* run = app.add_subcommand("run", "Train one configuration or an ablation grid");
  run->add_option("--config", run_args.config_path, "Experiment config (JSON)")
      ->required();
  run->add_option("--out", run_args.out_override, "Override the output directory");
  run->add_option("--seed", run_args.seed_override, "Override the model seed");
  run->add_option("--steps", run_args.steps_override, "Override the training step count");

  std::string verify_which = "all";
  std::size_t verify_coords = 25;
  auto* verify = app.add_subcommand("verify", "Run gradient checks and invariant suites");
  verify->add_option("suite", verify_which, "gradcheck, invariants, or all")
      ->check(CLI::IsMember({"gradcheck", "invariants", "all"}));
  verify->add_option("--coords", verify_coords,
                     "Finite-difference coordinates checked per tensor (0 = all)");

  std::string gd_task = "copy", gd_out = "data";
  std::size_t gd_size = 512, gd_eval = 64, gd_prompt = 6, gd_vocab = 16;
  std::uint64_t gd_seed = 7;
  auto* gen = app.add_subcommand("gen-data", "Write deterministic synthetic datasets");
  gen->add_option("--task", gd_task, "copy, reverse, or modadd")
      ->check(CLI::IsMember({"copy", "reverse", "modadd"}));
  gen->add_option("--size", gd_size, "Training sequences");
  gen->add_option("--eval-size", gd_eval, "Evaluation sequences");
  gen->add_option("--seed", gd_seed, "Generation seed");
  gen->add_option("--prompt-len", gd_prompt, "Prompt tokens per sequence");
  gen->add_option("--vocab", gd_vocab, "Data token alphabet size");
  gen->add_option("--out", gd_out, "Output directory");

  std::string report_in;
  auto* report = app.add_subcommand("report", "Summarize a metrics stream as a table");
  report->add_option("--in", report_in, "Run directory or metrics.jsonl path")->required();

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) return cmd_run(run_args);
    if (verify->parsed()) return cmd_verify(verify_which, verify_coords);
    if (gen->parsed())
      return cmd_gen_data(gd_task, gd_size, gd_eval, gd_seed, gd_prompt, gd_vocab, gd_out);
    if (report->parsed()) return cmd_report(report_in);
  } catch (const ordmoe::config_error& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kExitConfigError;
  } catch (const ordmoe::numeric_error& e) {
    std::cerr << "numeric abort: " << e.what() << '\n';
    return kExitNumericAbort;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kExitConfigError;
  }
  return kExitOk;
}
