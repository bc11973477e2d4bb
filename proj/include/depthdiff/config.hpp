#pragma once

// Flat key=value run configuration with dotted section prefixes.
//
//   # comment
//   vae.latent_channels = 4
//   train.unet.lr = 5e-5
//
// Every key is declared with a type and a default. Values are canonicalized on
// assignment (integers in decimal, reals with 17 significant digits, booleans as
// true/false), so the canonical text, and hence the hash, depends only on the
// resolved values and never on how they were spelled.

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "depthdiff/depth_codec.hpp"
#include "depthdiff/diffusion.hpp"
#include "depthdiff/ensemble.hpp"
#include "depthdiff/scene.hpp"
#include "depthdiff/training.hpp"
#include "depthdiff/unet.hpp"
#include "depthdiff/vae.hpp"

namespace depthdiff {

enum class Precision { f32, f64 };

std::string to_string(Precision p);
Precision precision_from_string(const std::string& s);

enum class RegimeMix { indoor, outdoor, mixed };

struct SceneGenConfig {
  int count = 2000;
  int height = 48;
  int width = 48;
  double hfov_deg = 60.0;
  RegimeMix regime = RegimeMix::mixed;
  double indoor_fraction = 0.5;
  bool holes = false;

  void validate() const;
  CameraIntrinsics camera() const { return CameraIntrinsics::from_fov(width, height, hfov_deg); }
};

class RunConfig {
 public:
  RunConfig();

  /// Parses text over the defaults. Unknown keys, duplicates, malformed lines and
  /// ill-typed values throw ConfigError naming `origin` and the line.
  static RunConfig parse(std::string_view text, const std::string& origin = "<text>");
  static RunConfig load(const std::filesystem::path& path);

  void set(const std::string& key, const std::string& value);
  const std::string& get(const std::string& key) const;
  bool has(const std::string& key) const { return values_.count(key) != 0; }

  std::int64_t get_int(const std::string& key) const;
  std::uint64_t get_u64(const std::string& key) const;
  double get_real(const std::string& key) const;
  bool get_bool(const std::string& key) const;

  /// Sorted "key=value" lines.
  std::string canonical() const;
  std::uint64_t hash() const;
  /// Hash over the keys starting with any of `prefixes`.
  std::uint64_t hash_of(const std::vector<std::string>& prefixes) const;

  std::uint64_t seed() const { return get_u64("seed"); }
  Precision precision() const { return precision_from_string(get("precision")); }
  DepthRange depth_range() const;
  SceneGenConfig scene_gen() const;
  VaeConfig vae() const;
  UNetConfig unet() const;
  DiffusionConfig diffusion() const;
  Aggregation aggregation() const { return aggregation_from_string(get("ensemble.aggregation")); }
  /// section is one of "image_vae", "depth_vae", "unet".
  TrainConfig train(const std::string& section) const;

  /// Hash identifying a trained VAE: architecture, depth range and image extent.
  std::uint64_t vae_hash() const { return hash_of({"vae.", "depth.", "data.height", "data.width"}); }

  /// Throws ConfigError if any typed view fails validation.
  void validate() const;

 private:
  std::map<std::string, std::string> values_;
};

}  // namespace depthdiff
