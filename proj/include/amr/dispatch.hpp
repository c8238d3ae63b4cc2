#pragma once

// Experiment orchestration behind the `amr` executable.
//
//   amr train      [--config FILE] [--preset NAME] [--<key> VALUE ...]
//   amr eval       ... [--checkpoint PATH]
//   amr grid       ... [--checkpoint PATH] [--mode convex|bernoulli|both]
//   amr sweep      ... [--seeds N] [--lambda-sweep]
//   amr fetch-data [--root DIR] [--dataset NAME ...]
//
// Exit codes: 0 ok, 1 internal error, 2 usage/config, 3 data, 4 numeric.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "amr/config.hpp"
#include "amr/data.hpp"
#include "amr/trainer.hpp"

namespace amr {

constexpr int kExitOk = 0;
constexpr int kExitInternal = 1;
constexpr int kExitUsage = 2;
constexpr int kExitData = 3;
constexpr int kExitNumeric = 4;

/// Version string stamped into manifests.
std::string code_version();
/// Compiled-in default data root (overridden by $AMR_DATA_ROOT).
std::string default_data_root();

/// Runs the toggled evaluations on a trained state, appending records to
/// <output>/results.jsonl and writing grids under <output>/grids/.
nlohmann::json evaluate_run(const ExperimentConfig& cfg, TrainState& state, const Dataset& data);

/// Writes <dir>/<name> with the config digest, seed, code version and wall time.
void write_manifest(const std::filesystem::path& dir, const std::string& name, const ExperimentConfig& cfg,
                    const std::string& subcommand, double wall_seconds, const nlohmann::json& extra = {});

/// train + evaluate + manifest for one config.
nlohmann::json train_and_evaluate(const ExperimentConfig& cfg);

struct SweepGroup {
  double lambda = 0.0;
  std::vector<std::uint64_t> seeds;
  std::vector<double> best_val_acc;
  double mean = 0.0;
  /// Population standard deviation over the seeds.
  double std = 0.0;
};

/// Runs `n_seeds` consecutive seeds (cfg.seed, cfg.seed + 1, ...) for each
/// lambda (just cfg.lambda when `lambdas` is empty), each into its own
/// subdirectory, and writes <output>/summary.json.
std::vector<SweepGroup> run_sweep(const ExperimentConfig& cfg, int n_seeds, const std::vector<double>& lambdas);

/// mean and population std.
std::pair<double, double> mean_std(const std::vector<double>& values);

/// Full CLI; never throws.
int run_cli(int argc, char** argv);

}  // namespace amr
