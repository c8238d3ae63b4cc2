#pragma once

// Alternating-update training loop: per batch one discriminator step on
// detached generator outputs, one generator-path step, then one probe step.
// Run directories hold config.txt, metrics.jsonl, timing.jsonl and
// checkpoints/{latest,best}.ckpt.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "amr/config.hpp"
#include "amr/data.hpp"
#include "amr/nets.hpp"
#include "amr/objectives.hpp"
#include "amr/rng.hpp"

namespace amr {

/// Adam with coupled L2 weight decay (grad += decay * param), matching the
/// classic formulation. Parameters are updated in place under NoGradGuard.
class Adam {
 public:
  Adam() = default;
  Adam(std::vector<std::pair<std::string, torch::Tensor>> params, OptimizerConfig cfg);

  /// `grads[i]` belongs to params()[i]; undefined gradients are skipped.
  void step(const std::vector<torch::Tensor>& grads);

  const std::vector<std::pair<std::string, torch::Tensor>>& params() const { return params_; }
  std::vector<torch::Tensor> tensors() const;
  const OptimizerConfig& config() const { return cfg_; }
  std::int64_t steps() const { return steps_; }

  /// Moment buffers keyed "<param path>.m" / "<param path>.v".
  std::map<std::string, torch::Tensor> state() const;
  void load_state(const std::map<std::string, torch::Tensor>& tensors, std::int64_t steps);

 private:
  std::vector<std::pair<std::string, torch::Tensor>> params_;
  std::vector<torch::Tensor> m_, v_;
  OptimizerConfig cfg_;
  std::int64_t steps_ = 0;
};

/// Architecture implied by a config and dataset: bottleneck (d_h / 16, 4, 4)
/// for images; the MLP family with no output squash for 2-D points.
AutoencoderSpec spec_for(const ExperimentConfig& cfg, const Dataset& data);

ObjectiveConfig objective_for(const ExperimentConfig& cfg);

struct TrainState {
  ExperimentConfig config;
  Networks nets{nullptr};
  Adam gen_opt, disc_opt, probe_opt;
  Rng rng;
  std::int64_t epoch = 0;
  std::int64_t step = 0;
  /// Best validation probe accuracy so far; -1 before the first evaluation.
  double best_val_acc = -1.0;

  /// Fresh networks (initialised from `init_seed`) and optimizers.
  static TrainState create(const ExperimentConfig& cfg, const AutoencoderSpec& spec, std::uint64_t init_seed,
                           Rng rng);
};

/// k index tensors; position 0 is the identity, positions 1..k-1 are
/// independent uniform permutations (fixed points allowed).
std::vector<torch::Tensor> sample_partners(std::int64_t batch, int k, Rng& rng);

struct StepResult {
  LossReport report;
  std::int64_t probe_correct = 0;
  std::int64_t probe_total = 0;
};

/// One D update, one generator-path update, one probe update. Throws
/// NumericError naming the first non-finite loss term.
StepResult train_step(TrainState& state, const Batch& batch);

/// The three phases separately, for isolation tests. Each uses `draw` for any
/// mixing; train_step draws once and shares it between D and G.
LossReport discriminator_step(TrainState& state, const Batch& batch, const MixDraw& draw);
LossReport generator_step(TrainState& state, const Batch& batch, const MixDraw& draw);
/// Returns (correct, total) on the batch before the update.
std::pair<std::int64_t, std::int64_t> probe_step(TrainState& state, const Batch& batch);

MixDraw draw_mix(TrainState& state, std::int64_t batch);

struct RunResult {
  TrainState state;
  std::vector<nlohmann::json> metrics;
  Dataset data;
};

/// Seeds derived from the run seed (ablation subset, network init, training
/// stream), so a run is a pure function of (config, dataset).
struct RunSeeds {
  std::uint64_t ablation, init, train;
  static RunSeeds from(std::uint64_t seed);
};

/// Loads (and ablates) the dataset a config names.
Dataset load_for(const ExperimentConfig& cfg);

/// Trains for cfg.epochs, writing into cfg.output. Resumes from cfg.resume
/// when set (ConfigError when the checkpoint does not match the config).
RunResult run_experiment(const ExperimentConfig& cfg);

/// Split used for per-epoch probe validation.
const Split& validation_split(const ExperimentConfig& cfg, const Dataset& data);

Batch make_batch(const Split& split, const torch::Tensor& index);

}  // namespace amr
