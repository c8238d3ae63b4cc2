#pragma once

// ExperimentConfig and its flat key/value text format:
//
//   # comment
//   dataset = mnist
//   mix = mixup
//   lambda = 10
//
// Every field has a snake_case key; the CLI exposes the same fields as
// --kebab-case flags. Resolution order: preset, then file, then flags.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "amr/mixing.hpp"

namespace amr {

struct OptimizerConfig {
  double lr = 1e-4;
  double b1 = 0.5;
  double b2 = 0.99;
  double weight_decay = 1e-5;

  void validate() const;
};

struct ExperimentConfig {
  std::string dataset;
  std::string data_root;
  MixMode mix = MixMode::Mixup;
  int k = 2;
  double lambda = 10.0;
  double beta = 0.0;
  std::int64_t d_h = 32;
  OptimizerConfig optim;
  /// Probe learning rate; 0 means "same as lr".
  double probe_lr = 0.0;
  int epochs = 10;
  std::int64_t batch_size = 64;
  std::uint64_t seed = 0;
  /// Training examples kept after ablation; 0 keeps all.
  std::int64_t n_keep = 0;
  std::int64_t val_size = 1000;
  /// Validate the probe on the official test split instead of the held-out one.
  bool validate_on_test = false;
  std::string output = "runs/default";
  std::string resume;

  // architecture
  std::int64_t width = 32;
  int mlp_layers = 2;
  int sn_iters = 1;

  // supervised mixer / ACAI
  MaskGradient mask_gradient = MaskGradient::StraightThrough;
  double temperature = 0.5;
  bool cls_on_real = true;
  double acai_gamma = 0.2;

  // spiral
  std::int64_t spiral_n = 5000;
  double noise_sd = 0.01;

  // evaluation
  bool eval_probe = true;
  bool eval_disentanglement = false;
  bool eval_grids = false;
  bool eval_spiral = false;
  std::int64_t dis_votes = 800;
  std::int64_t dis_batch = 64;
  int grid_steps = 8;
  int grid_rows = 4;
  std::int64_t spiral_mixes = 2000;

  /// Adds wall_seconds to each metrics record (makes logs run-dependent).
  bool log_wall_time = false;

  /// Throws UsageError naming the offending key.
  void validate() const;

  /// Canonical text form (every key, fixed order).
  std::string to_text() const;
  /// FNV-1a digest of to_text().
  std::string digest() const;

  friend bool operator==(const ExperimentConfig& a, const ExperimentConfig& b) { return a.to_text() == b.to_text(); }
};

/// Keys in canonical order.
const std::vector<std::string>& config_keys();

/// Assigns one key from its text form. Unknown keys and malformed values throw
/// UsageError naming the key.
void set_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value);
std::string get_config_value(const ExperimentConfig& cfg, const std::string& key);

/// Parses key/value text into (key, value) pairs without applying them.
std::vector<std::pair<std::string, std::string>> parse_config_text(const std::string& text);

/// Resolves preset (may be empty), then the file (may be empty), then the
/// overrides, and validates. `data_root` defaults to $AMR_DATA_ROOT, falling
/// back to `default_data_root`.
ExperimentConfig parse_config(const std::filesystem::path& file, const std::map<std::string, std::string>& overrides,
                              const std::string& preset = {}, const std::string& default_data_root = {});

ExperimentConfig config_from_text(const std::string& text);

/// Named reference presets (key -> value overrides).
const std::map<std::string, std::map<std::string, std::string>>& presets();

/// Reconstruction-weight sweep used by `amr sweep --lambda-sweep`.
const std::vector<double>& lambda_sweep();

/// 64-bit FNV-1a digest of a string as 16 hex digits.
std::string fnv1a_hex(const std::string& text);

}  // namespace amr
