#pragma once

// Binary PPM (P6, 8-bit RGB) and PFM (32-bit float, little-endian, rows stored
// bottom-up) readers and writers.

#include <filesystem>

#include "depthdiff/image.hpp"

namespace depthdiff {

/// Quantizes each channel to round(255 * clamp(v, 0, 1)).
void write_ppm(const std::filesystem::path& path, const RgbImage& img);
/// Channel values come back as k / 255.
RgbImage read_ppm(const std::filesystem::path& path);

/// Single-channel PFM ("Pf") with scale -1. Invalid pixels are written as 0.
void write_pfm(const std::filesystem::path& path, const DepthMap& depth);
void write_pfm(const std::filesystem::path& path, const Plane& values);
/// Pixels that are not finite and positive are marked invalid.
DepthMap read_pfm(const std::filesystem::path& path);

}  // namespace depthdiff
