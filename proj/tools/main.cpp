// gradinv: federated-learning simulation and gradient-inversion experiments.
//
// Subcommands mirror the pipeline stages: simulate produces an observation
// log, attack reconstructs from it, match runs the multi-epoch matching,
// evaluate scores stored reconstructions, e2e chains everything, selftest
// runs the built-in oracle checks.

#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>

#include "gradinv/experiment.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

gradinv::cli::ExperimentConfig load_config(const std::string& path, const std::string& out_dir) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw gradinv::ConfigError("config: cannot open '" + path + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  gradinv::cli::ExperimentConfig cfg = gradinv::cli::parse_config(ss.str());
  if (!out_dir.empty()) cfg.output_dir = out_dir;
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Federated-learning simulator and gradient inversion attack engine"};
  app.require_subcommand(1);

  std::string config_path;
  std::string out_dir;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("-c,--config", config_path, "experiment config (JSON)")->required();
    cmd->add_option("-o,--out", out_dir, "output directory (overrides config)");
  };

  CLI::App* simulate = app.add_subcommand("simulate", "run FL training, write the observation log");
  add_common(simulate);
  CLI::App* attack = app.add_subcommand("attack", "reconstruct from a stored observation log");
  add_common(attack);
  CLI::App* match = app.add_subcommand("match", "pre-reconstruct and match updates across epochs");
  add_common(match);
  CLI::App* evaluate = app.add_subcommand("evaluate", "score stored reconstructions");
  add_common(evaluate);
  CLI::App* e2e = app.add_subcommand("e2e", "full pipeline: simulate, attack, match, evaluate");
  add_common(e2e);
  app.add_subcommand("selftest", "run the built-in finite-difference and oracle checks");

  CLI11_PARSE(app, argc, argv);

  try {
    if (app.got_subcommand("selftest")) {
      return gradinv::cli::run_selftest(std::cout) ? kExitOk : kExitRuntime;
    }
    gradinv::cli::ExperimentConfig cfg = load_config(config_path, out_dir);
    if (app.got_subcommand(simulate)) {
      gradinv::cli::stage_simulate(cfg);
    } else if (app.got_subcommand(attack)) {
      gradinv::cli::stage_attack(cfg);
    } else if (app.got_subcommand(match)) {
      gradinv::cli::stage_match(cfg);
    } else if (app.got_subcommand(evaluate)) {
      gradinv::cli::stage_evaluate(cfg);
    } else if (app.got_subcommand(e2e)) {
      gradinv::cli::run_experiment(cfg);
    }
    return kExitOk;
  } catch (const gradinv::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return kExitConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
}
