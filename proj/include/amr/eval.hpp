#pragma once

// Evaluation protocols: linear-probe accuracy, the fixed-factor
// variance-argmin disentanglement metric, interpolation grids, and spiral
// manifold coverage. Everything here reads frozen parameters only.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "amr/data.hpp"
#include "amr/mixing.hpp"
#include "amr/nets.hpp"
#include "amr/rng.hpp"

namespace amr {

// --- probe ----------------------------------------------------------------------

/// Images (B, C, H, W) -> class logits (B, classes).
using ClassifierFn = std::function<torch::Tensor(const torch::Tensor&)>;

/// Fraction of argmax predictions equal to the labels. Throws
/// std::invalid_argument for an empty split or one without labels.
double probe_accuracy(const ClassifierFn& classify, const Split& split, std::int64_t batch_size = 500);
double probe_accuracy(Networks& nets, const Split& split, std::int64_t batch_size = 500);

struct ProbeResult {
  std::vector<double> train_acc, val_acc;
  double best_val_acc = 0.0;
  std::uint64_t seed = 0;

  /// Built from metrics.jsonl records; best = max over epochs.
  static ProbeResult from_metrics(const std::vector<nlohmann::json>& records, std::uint64_t seed);
};

// --- disentanglement ------------------------------------------------------------

/// Factor rows (B, num_factors) int64 -> codes (B, d).
using CodeFn = std::function<torch::Tensor(const torch::Tensor&)>;

struct DisentanglementConfig {
  std::int64_t n_votes = 800;
  std::int64_t vote_batch = 64;
  double train_fraction = 0.8;
  /// Uniform factor rows used to estimate per-dimension scale.
  std::int64_t global_samples = 10000;
  /// Dimensions with a smaller global std never win a vote.
  double collapse_std = 1e-8;
};

struct DisentanglementResult {
  /// votes[d][f]: training votes where dimension d had the least variance
  /// with factor f fixed.
  std::vector<std::vector<std::int64_t>> votes;
  /// Majority factor per dimension; -1 when the dimension received no votes.
  std::vector<int> majority;
  double accuracy = 0.0;
  std::vector<int> collapsed;
  std::int64_t train_votes = 0, test_votes = 0;
};

/// Only factors with cardinality >= 2 are sampled as the fixed factor (a
/// constant factor cannot be distinguished from "fixed").
DisentanglementResult disentanglement_score(const CodeFn& encode, const FactorSpec& spec,
                                            const DisentanglementConfig& cfg, Rng& rng);

/// Encoder codes of rendered DSprites factor rows.
CodeFn dsprites_code_fn(Networks& nets);

// --- interpolation grids --------------------------------------------------------

enum class GridMode { Convex, Bernoulli };

/// One row of `steps` decoded tiles between x1 (left) and x2 (right), as
/// (C, H, steps * W) in [-1, 1]. Convex: weight on h1 = 1 - j/(steps-1).
/// Bernoulli: feature map i comes from h1 iff u_i < 1 - j/(steps-1), with u
/// drawn once per row from `row_seed`. Each tile is decoded on its own so
/// the endpoints equal decode(encode(x)) bit for bit.
torch::Tensor interpolation_grid(Networks& nets, GridMode mode, const torch::Tensor& x1, const torch::Tensor& x2,
                                 int steps, std::uint64_t row_seed = 0);

/// Stacks rows vertically.
torch::Tensor stack_rows(const std::vector<torch::Tensor>& rows);

/// Writes a (C, H, W) image in [-1, 1] as a lossless PNG (C = 1 or 3).
void write_grid_png(const std::filesystem::path& path, const torch::Tensor& image);

// --- spiral ---------------------------------------------------------------------

/// Fraction of `points` (M, 2) whose nearest reference point (R, 2) lies
/// within `epsilon` (exact brute force, float64). Throws std::invalid_argument
/// for an empty reference set or epsilon <= 0.
double spiral_coverage(const torch::Tensor& points, const torch::Tensor& reference, double epsilon);

/// Decoded mixup mixes of `n` random pairs from `split`, as (n, 2).
torch::Tensor decoded_mix_points(Networks& nets, const Split& split, std::int64_t n, Rng& rng);

// --- records --------------------------------------------------------------------

struct ResultRecord {
  std::string metric;
  double value = 0.0;
  std::string config_digest;
  std::uint64_t seed = 0;

  nlohmann::json to_json() const;
};

/// Appends one JSON line to <dir>/results.jsonl.
void append_result(const std::filesystem::path& dir, const ResultRecord& record);

}  // namespace amr
