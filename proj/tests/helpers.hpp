#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <string>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>
#include <torch/torch.h>

#include "amr/data.hpp"
#include "amr/nets.hpp"

namespace amr::testing {

/// Fresh empty directory under the system temp dir.
inline std::filesystem::path temp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("amr_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

/// Tiny 8x8 conv geometry (bottleneck 2x4x4) used by the gradient oracles.
inline AutoencoderSpec toy_spec(std::int64_t attributes = 0, std::int64_t classes = 0) {
  AutoencoderSpec s;
  s.channels = 1;
  s.height = s.width = 8;
  s.code_channels = 2;
  s.code_size = 4;
  s.width_base = 2;
  s.num_attributes = attributes;
  s.embed_hidden = 4;
  s.num_classes = classes;
  return s;
}

inline std::int64_t parameter_count(torch::nn::Module& m) {
  std::int64_t n = 0;
  for (const auto& p : m.parameters()) n += p.numel();
  return n;
}

/// Keys whose tensors differ bit-wise between two snapshots.
inline std::vector<std::string> changed_keys(const std::map<std::string, torch::Tensor>& before,
                                             const std::map<std::string, torch::Tensor>& after) {
  std::vector<std::string> out;
  for (const auto& [k, v] : before) {
    if (!torch::equal(v, after.at(k))) out.push_back(k);
  }
  return out;
}

inline bool starts_with(const std::string& s, const std::string& prefix) { return s.rfind(prefix, 0) == 0; }

/// Writes a small labelled IDX dataset (two classes of vertical / horizontal
/// bars with noise) under <root>/<name>.
inline void write_toy_idx_dataset(const std::filesystem::path& root, const std::string& name, std::int64_t n_train,
                                  std::int64_t n_test, std::int64_t side = 16, std::uint64_t seed = 3) {
  const auto dir = root / name;
  std::filesystem::create_directories(dir);
  Rng rng(seed);
  auto make = [&](std::int64_t n, const std::string& split, nlohmann::json& manifest) {
    auto images = torch::zeros({n, side, side}, torch::kUInt8);
    auto labels = torch::zeros({n}, torch::kUInt8);
    auto img = images.accessor<std::uint8_t, 3>();
    auto lbl = labels.accessor<std::uint8_t, 1>();
    for (std::int64_t i = 0; i < n; ++i) {
      const auto cls = rng.index(2);
      const auto pos = rng.index(side);
      lbl[i] = static_cast<std::uint8_t>(cls);
      for (std::int64_t y = 0; y < side; ++y) {
        for (std::int64_t x = 0; x < side; ++x) {
          const bool on = cls == 0 ? x == pos : y == pos;
          img[i][y][x] = static_cast<std::uint8_t>(on ? 255 : rng.index(40));
        }
      }
    }
    const auto img_file = split + "-images.idx";
    const auto lbl_file = split + "-labels.idx";
    write_idx(dir / img_file, images);
    write_idx(dir / lbl_file, labels);
    manifest["splits"][split] = {{"images", img_file}, {"labels", lbl_file}, {"count", n}};
    manifest["checksums"][img_file] = file_checksum(dir / img_file);
    manifest["checksums"][lbl_file] = file_checksum(dir / lbl_file);
  };
  nlohmann::json manifest = {{"name", name},   {"format", "idx"},     {"channels", 1},
                             {"height", side}, {"width", side},       {"num_classes", 2}};
  make(n_train, "train", manifest);
  if (n_test > 0) make(n_test, "test", manifest);
  std::ofstream(dir / "manifest.json") << manifest.dump(2);
}


}  // namespace amr::testing
