#pragma once

#include "sheafdmfl/config.hpp"
#include "sheafdmfl/trainer.hpp"

#include <string>
#include <vector>

namespace sheafdmfl {

/// Executes one experiment, writing runlog.csv, summary.json, timing.csv
/// and optional checkpoints under cfg.output.dir. Honors output.resume.
/// The CSV rows are flushed as they are produced so an aborted run leaves
/// a usable partial log.
TrainResult run_experiment(const ExperimentConfig& cfg);

/// Per-seed runs under <out>/seed_<s>/ plus aggregate.csv and
/// sweep_summary.json with per-group mean and standard deviation of the
/// final test accuracy. Returns the number of failed seeds.
int run_sweep(const ExperimentConfig& base, const std::vector<std::uint64_t>& seeds);

/// Entry point behind main(): run | sweep | verify.
int main_cli(int argc, char** argv);

}  // namespace sheafdmfl
