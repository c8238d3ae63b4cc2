#pragma once

// Binary checkpoint archive:
//
//   "AMRCKPT1"
//   u64 len + resolved config text
//   u64 len + rng state text
//   u64 len + meta JSON (epoch, step, watermark, optimizer step counts)
//   u64 count, then per tensor in key order:
//     u64 len + key, u8 dtype, u8 ndim, i64 dims[ndim], raw little-endian data
//
// All integers little-endian. Writing the same state twice yields identical
// bytes.

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "amr/trainer.hpp"

namespace amr {

struct CheckpointData {
  std::string config_text;
  std::string rng_state;
  nlohmann::json meta = nlohmann::json::object();
  std::map<std::string, torch::Tensor> tensors;
};

void write_checkpoint(const std::filesystem::path& path, const CheckpointData& data);
/// Throws ConfigError on a malformed or truncated file.
CheckpointData read_checkpoint(const std::filesystem::path& path);

/// Networks ("net.<path>") and optimizer moments ("optim.<group>.<path>.m|v").
CheckpointData capture(const TrainState& state);

/// Rebuilds a TrainState for `cfg` from a checkpoint. Throws ConfigError when
/// the checkpoint's config differs from `cfg` in any training-relevant key or
/// its tensors do not match the architecture.
TrainState restore(const CheckpointData& data, const ExperimentConfig& cfg, const AutoencoderSpec& spec);

/// Keys allowed to differ between a checkpoint and the resuming config.
bool resume_may_differ(const std::string& key);
/// Training-relevant keys whose values differ.
std::vector<std::string> config_mismatches(const ExperimentConfig& a, const ExperimentConfig& b);

void save_state(const std::filesystem::path& path, const TrainState& state);
TrainState load_state(const std::filesystem::path& path, const ExperimentConfig& cfg, const AutoencoderSpec& spec);

}  // namespace amr
