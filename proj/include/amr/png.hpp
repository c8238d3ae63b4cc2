#pragma once

#include <cstdint>
#include <filesystem>
#include <span>

namespace amr {

/// Minimal lossless PNG writer: 8-bit grayscale (channels = 1) or RGB
/// (channels = 3), row-major HWC pixels, no filtering.
void write_png(const std::filesystem::path& path, std::span<const std::uint8_t> pixels, int width, int height,
               int channels);

}  // namespace amr
