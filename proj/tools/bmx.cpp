// bmx: belief-matching experiment runner.
//
//   bmx <command> [--config FILE] [--set key=value ...] [--out DIR] [--seed N]
//                 [--checkpoint FILE] [--trials N]
//
// Exit codes: 0 ok, 1 usage/config, 2 I/O, 3 divergence, 4 verification failure.

#include <bm/experiment.hpp>

#include <CLI11.hpp>

#include <iomanip>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace {

struct CommandOptions {
  std::optional<std::string> config;
  std::vector<std::string> assignments;
  std::optional<std::string> out;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> checkpoint;
  std::optional<int> trials;
};

void add_common_options(CLI::App* sub, CommandOptions& o) {
  sub->add_option("--config", o.config, "key=value text file or a config.json from an earlier run");
  sub->add_option("--set", o.assignments, "override one key, e.g. --set epochs=50 (repeatable)");
  sub->add_option("--out", o.out, "output directory");
  sub->add_option("--seed", o.seed, "single run seed (replaces the seeds list)");
  sub->add_option("--checkpoint", o.checkpoint, "model checkpoint (eval, ood)");
  sub->add_option("--trials", o.trials, "instances per suite (gradcheck)");
}

void print_keys() {
  std::cout << std::left;
  for (const auto& k : bm::config_keys()) {
    std::cout << "  " << std::setw(22) << k.name << std::setw(16) << ("[" + std::string(k.fallback) + "]") << k.help
              << '\n';
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Belief-matching experiments: training, evaluation, OOD, beta sweeps, semi-supervised runs and gradient checks"};
  app.require_subcommand(0, 1);
  bool list_keys = false;
  app.add_flag("--keys", list_keys, "list configuration keys with their defaults");

  CommandOptions opts;
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"train", "train models over the lambda and seed grid"},
      {"eval", "test error, ECE and mean entropy of a checkpoint"},
      {"ood", "predictive-entropy histograms on in-distribution and OOD inputs"},
      {"beta-sweep", "test error across prior concentrations, two strategies"},
      {"semisup-train", "semi-supervised training with VAT or Pi-model consistency"},
      {"gradcheck", "finite-difference verification of all analytic gradients"},
  };
  for (const auto& [name, help] : commands) add_common_options(app.add_subcommand(name, help), opts);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? bm::kExitOk : bm::kExitUsage;
  }
  if (list_keys) {
    print_keys();
    return bm::kExitOk;
  }
  if (app.get_subcommands().empty()) {
    std::cerr << app.help();
    return bm::kExitUsage;
  }
  const std::string command = app.get_subcommands().front()->get_name();

  bm::ExperimentConfig cfg;
  try {
    std::vector<std::pair<std::string, std::string>> overrides;
    for (const auto& a : opts.assignments) {
      const auto eq = a.find('=');
      if (eq == std::string::npos) throw bm::ConfigError("--set expects key=value, got '" + a + "'");
      overrides.emplace_back(a.substr(0, eq), a.substr(eq + 1));
    }
    if (opts.out) overrides.emplace_back("out", *opts.out);
    if (opts.seed) overrides.emplace_back("seeds", std::to_string(*opts.seed));
    if (opts.checkpoint) overrides.emplace_back("checkpoint", *opts.checkpoint);
    if (opts.trials) overrides.emplace_back("trials", std::to_string(*opts.trials));
    cfg = bm::ExperimentConfig::resolve(opts.config, overrides);
  } catch (const bm::IoError& e) {
    std::cerr << "I/O error: " << e.what() << '\n';
    return bm::kExitIo;
  } catch (const std::exception& e) {
    std::cerr << "configuration error: " << e.what() << '\n';
    return bm::kExitUsage;
  }
  return bm::run_command(command, cfg);
}
