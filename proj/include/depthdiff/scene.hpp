#pragma once

// Procedural ray-cast RGB-D scenes. Camera frame: x right, y down, z forward,
// camera at the origin. Depth is z-depth (distance along the optical axis).

#include <Eigen/Dense>

#include <cstdint>
#include <string>
#include <variant>
#include <vector>

#include "depthdiff/image.hpp"

namespace depthdiff {

struct CameraIntrinsics {
  double fx = 0, fy = 0, cx = 0, cy = 0;
  int width = 0, height = 0;

  /// Square pixels, principal point at the image center, horizontal field of view in degrees.
  static CameraIntrinsics from_fov(int width, int height, double hfov_deg);
  /// Throws ConfigError on nonpositive focal lengths or an out-of-image principal point.
  void validate() const;
  /// Unnormalized ray through the center of pixel (row, col); its z component is 1.
  Eigen::Vector3d ray(int row, int col) const;
};

enum class Regime { indoor, outdoor };

std::string to_string(Regime r);
Regime regime_from_string(const std::string& s);

struct Sphere {
  Eigen::Vector3d center;
  double radius;
};

/// Box rotated by `yaw` radians about the vertical (y) axis.
struct Box {
  Eigen::Vector3d center;
  Eigen::Vector3d half_extents;
  double yaw = 0.0;
};

/// Infinite plane { p : normal . p = offset }.
struct PlaneSurface {
  Eigen::Vector3d normal;
  double offset;
};

struct Primitive {
  std::variant<Sphere, Box, PlaneSurface> shape;
  Eigen::Vector3d albedo;
};

struct SceneSpec {
  std::uint64_t seed = 0;
  Regime regime = Regime::indoor;
  std::vector<Primitive> primitives;
  Eigen::Vector3d light_direction{0, -1, 0};  // unit vector toward the light
  bool inject_holes = false;
};

struct RenderResult {
  RgbImage rgb;
  DepthMap depth;
  Eigen::Array<int, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> primitive_id;  // -1 where nothing was hit
};

inline constexpr double kAmbient = 0.3;

/// Deterministic in (seed, regime, camera). Indoor scenes are a closed room
/// (5 planes) with 1-3 objects; outdoor scenes are a ground plane and a distant
/// backdrop with 1-6 objects. Total primitive count lies in [3, 8].
SceneSpec sample_scene(std::uint64_t seed, Regime regime, const CameraIntrinsics& camera, bool inject_holes = false);

/// Nearest-hit ray cast with flat Lambertian shading from one directional light.
RenderResult render(const SceneSpec& spec, const CameraIntrinsics& camera);

/// Nearest positive hit distance along `ray` (ray parameter, equal to z-depth for
/// rays with unit z component); returns a negative value on a miss.
double intersect(const Primitive& prim, const Eigen::Vector3d& ray, Eigen::Vector3d* normal = nullptr);

/// Mirrors image and depth about the vertical axis when coin is true.
void augment_hflip(RgbImage& rgb, DepthMap& depth, bool coin);

}  // namespace depthdiff
