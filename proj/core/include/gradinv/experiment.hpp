#pragma once

#include <functional>
#include <iosfwd>
#include <string>
#include <vector>

#include "gradinv/config.hpp"
#include "gradinv/flsim.hpp"

namespace gradinv::cli {

/// Runs stages over [0, n) on a small worker pool; results must be written
/// by index so the output is independent of scheduling.
void parallel_for(int n, int workers, const std::function<void(int)>& fn);

/// simulate -> (infer labels) -> attack [-> match -> joint] -> evaluate.
/// Writes results.csv, a config echo, loss traces, timing and image grids
/// into config.output_dir, plus a MANIFEST stage log. Throws on stage
/// failure after recording the failed stage in the MANIFEST.
void run_experiment(const ExperimentConfig& config);

/// Individual stages, for the matching CLI subcommands. Artifacts written
/// by one stage are read back by the next.
void stage_simulate(const ExperimentConfig& config);
void stage_attack(const ExperimentConfig& config);
void stage_match(const ExperimentConfig& config);
void stage_evaluate(const ExperimentConfig& config);

/// Quick built-in oracle suite (finite differences, conv oracle, metric
/// formulas, one-step identity). Prints one line per check.
bool run_selftest(std::ostream& out);

}  // namespace gradinv::cli
