#pragma once

// Scene shards on disk: one PPM + PFM pair per scene and an index file.
//
// index.txt:
//   # depthdiff dataset
//   seed=<u64>
//   config_hash=<16 hex digits>
//   count=<n>
//   <name> <regime> <rgb file> <depth file>     (one line per scene)

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "depthdiff/config.hpp"
#include "depthdiff/image.hpp"
#include "depthdiff/scene.hpp"

namespace depthdiff {

struct SceneSample {
  std::string name;
  Regime regime = Regime::indoor;
  RgbImage rgb;
  DepthMap depth;
};

/// Scene `index` of the shard generated from `seed`. Independent of every other index.
SceneSample generate_sample(const SceneGenConfig& cfg, std::uint64_t seed, int index);

std::vector<SceneSample> generate_samples(const SceneGenConfig& cfg, std::uint64_t seed);

/// Writes cfg.count scenes plus index.txt into `dir` (created if missing).
void write_dataset(const std::filesystem::path& dir, const SceneGenConfig& cfg, std::uint64_t seed,
                   std::uint64_t config_hash);

/// Reads every pair listed in dir/index.txt.
std::vector<SceneSample> load_dataset(const std::filesystem::path& dir);

}  // namespace depthdiff
