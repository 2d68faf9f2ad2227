// rsds {generate|train|eval|theory|forecast} --config PATH [options]
// Unmatched --section.key=value arguments are treated as config overrides.

#include <CLI11.hpp>
#include <iostream>

#include "rsds/cli.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Exact-likelihood estimation of recurrent switching dynamical systems"};
  app.require_subcommand(1);
  rsds::CliOptions opt;
  std::uint64_t seed = 0;
  std::size_t threads = 1;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", opt.config, "Configuration file");
    sub->add_option("--out", opt.out, "Output path");
    sub->add_option("--seed", seed, "Seed for the command's random stream");
    sub->add_option("--threads", threads, "Worker threads");
    sub->add_flag("--deterministic", opt.deterministic, "Fixed-order reductions for bit-exact runs");
    sub->allow_extras();
  };
  auto* gen = app.add_subcommand("generate", "Generate a benchmark dataset");
  common(gen);
  std::size_t n_sequences = 0;
  gen->add_option("--n-sequences", n_sequences, "Number of training sequences");

  auto* train = app.add_subcommand("train", "Fit a model by exact likelihood");
  common(train);
  train->add_option("--data", opt.data, "Training dataset")->required();
  train->add_option("--resume", opt.resume, "Checkpoint to continue from");
  train->add_option("--log", opt.log, "Training log path (default: OUT.log)");

  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  common(eval);
  eval->add_option("--checkpoint", opt.checkpoint, "Model checkpoint")->required();
  eval->add_option("--data", opt.data, "Dataset")->required();

  auto* theory = app.add_subcommand("theory", "Identifiability checks and dominance bounds");
  common(theory);
  theory->add_option("--checkpoint", opt.checkpoint, "Model checkpoint");

  auto* fc = app.add_subcommand("forecast", "Roll out forecasts from observed contexts");
  common(fc);
  fc->add_option("--checkpoint", opt.checkpoint, "Model checkpoint")->required();
  fc->add_option("--data", opt.data, "Dataset")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : rsds::kExitUsage;
  }

  CLI::App* sub = app.get_subcommands().front();
  for (const auto& extra : sub->remaining()) {
    if (extra.rfind("--", 0) != 0 || extra.find('=') == std::string::npos || extra.find('.') == std::string::npos) {
      std::cerr << "level=error event=usage_error message=\"unexpected argument '" << extra << "'\"\n";
      return rsds::kExitUsage;
    }
    opt.overrides.push_back(extra.substr(2));
  }
  if (sub->count("--seed")) opt.seed = seed;
  if (sub->count("--threads")) opt.threads = threads;
  if (sub == gen && gen->count("--n-sequences"))
    opt.overrides.push_back("generator.n_sequences=" + std::to_string(n_sequences));

  const rsds::Logger log(std::cerr, rsds::log_level_from_env());
  const std::string name = sub->get_name();
  if (name == "generate") return rsds::cmd_generate(opt, std::cout, log);
  if (name == "train") return rsds::cmd_train(opt, std::cout, log);
  if (name == "eval") return rsds::cmd_eval(opt, std::cout, log);
  if (name == "theory") return rsds::cmd_theory(opt, std::cout, log);
  return rsds::cmd_forecast(opt, std::cout, log);
}
