#pragma once

// Dataset ingestion, normalisation, ablation subsampling, the synthetic spiral,
// and DSprites factor bookkeeping.
//
// On-disk layout (one directory per dataset under the data root):
//
//   <root>/<name>/manifest.json
//   <root>/<name>/<split>-images.idx    IDX uint8, (N, H, W) or (N, H, W, C)
//   <root>/<name>/<split>-labels.idx    IDX uint8, (N)
//
// manifest.json:
//   { "name": "mnist", "format": "idx", "channels": 1, "height": 28, "width": 28,
//     "num_classes": 10,
//     "splits": { "train": { "images": "...", "labels": "...", "count": 9000 },
//                 "test":  { ... } },
//     "checksums": { "<file>": "fnv1a64:<16 hex digits>", ... } }
//
// Synthetic datasets need no files: "spiral" is generated, "dsprites" is
// rendered procedurally from its factor grid, and "mnist_attr" is derived from
// the mnist directory by tagging each digit with {thick, inverted} transforms.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "amr/rng.hpp"

namespace amr {

struct Split {
  torch::Tensor images;      // (N, C, H, W) float32 in [-1, 1] (points: (N, 2, 1, 1))
  torch::Tensor labels;      // (N) int64, optional
  torch::Tensor attributes;  // (N, a) float32 in {0, 1}, optional
  torch::Tensor factors;     // (N, 6) int64 factor indices, DSprites only

  std::int64_t size() const { return images.defined() ? images.size(0) : 0; }
  bool empty() const { return size() == 0; }
  /// Rows `index` (int64 tensor) of every field.
  Split select(const torch::Tensor& index) const;
};

/// Per-factor cardinalities of a factor-grid dataset.
struct FactorSpec {
  std::vector<std::string> names;
  std::vector<std::int64_t> cardinalities;

  std::size_t num_factors() const { return cardinalities.size(); }
  /// Product of the cardinalities (the dataset size).
  std::int64_t size() const;
  /// Factors that can be varied (cardinality >= 2).
  std::vector<int> varying_factors() const;

  static FactorSpec dsprites();
};

struct Dataset {
  std::string name;
  std::int64_t channels = 1, height = 1, width = 1;
  std::int64_t num_classes = 0;
  std::vector<std::string> attribute_names;
  std::optional<FactorSpec> factors;
  Split train, val, test;
};

struct LoadOptions {
  /// Held out from train as the validation split (0 disables).
  std::int64_t val_size = 1000;
  /// Seed of the train/val carve; independent of the run seed so every run of
  /// a sweep validates on the same examples.
  std::uint64_t split_seed = 0;
  // spiral
  std::int64_t spiral_n = 5000;
  double noise_sd = 0.01;
  std::uint64_t spiral_seed = 0;
  // dsprites: number of rendered training images
  std::int64_t dsprites_n = 10000;
};

/// uint8 pixels -> [-1, 1].
torch::Tensor normalize_pixels(const torch::Tensor& pixels);
/// [-1, 1] -> [0, 255] as real values (exact inverse of normalize_pixels).
torch::Tensor denormalize_pixels(const torch::Tensor& x);
/// [-1, 1] -> uint8 with rounding and clamping.
torch::Tensor to_uint8(const torch::Tensor& x);

/// Throws DataError on missing or corrupt files. Never touches the network.
Dataset load_dataset(const std::string& name, const std::filesystem::path& root, const LoadOptions& options = {});

/// Uniform subset of the training split without replacement (original order
/// kept); validation and test are untouched.
Dataset ablate(const Dataset& dataset, std::int64_t n_keep, Rng& rng);

/// theta ~ U(0, 6 pi), r = theta / (6 pi), point = r (cos, sin) + N(0, sd^2).
Dataset make_spiral(std::int64_t n, double noise_sd, Rng& rng);
/// Noise-free curve point at angle theta.
std::pair<double, double> spiral_point(double theta);
constexpr double kSpiralTurns = 3.0;

/// Flat text table, one "x y" row per point.
void write_points_table(const std::filesystem::path& path, const torch::Tensor& points);
torch::Tensor read_points_table(const std::filesystem::path& path);

// --- DSprites ---------------------------------------------------------------

struct FactorBatch {
  torch::Tensor factors;  // (B, num_factors) int64
  int factor = 0;         // the fixed factor
  std::int64_t value = 0;
};

/// All rows share factor `factor_index` (value drawn uniformly unless given);
/// the other factors are uniform over their cardinalities.
FactorBatch fixed_factor_batch(const FactorSpec& spec, int factor_index, std::int64_t batch_size, Rng& rng,
                               std::optional<std::int64_t> value = std::nullopt);
FactorBatch dsprites_fixed_factor_batch(const Dataset& dataset, int factor_index, std::int64_t batch_size, Rng& rng,
                                        std::optional<std::int64_t> value = std::nullopt);

/// Renders DSprites factor rows (color, shape, scale, orientation, pos_x,
/// pos_y) into (B, 1, 64, 64) images in [-1, 1].
torch::Tensor render_dsprites(const torch::Tensor& factors);

// --- file helpers -----------------------------------------------------------

/// FNV-1a 64-bit digest of a file, formatted "fnv1a64:<hex>".
std::string file_checksum(const std::filesystem::path& path);
/// IDX writer used by the fetch tooling and tests. `pixels` is uint8 (N,H,W),
/// (N,H,W,C) or (N).
void write_idx(const std::filesystem::path& path, const torch::Tensor& pixels);
torch::Tensor read_idx(const std::filesystem::path& path);

}  // namespace amr
