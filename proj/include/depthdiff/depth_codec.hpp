#pragma once

// Metric depth <-> [-1, 1] model domain, and the 1 <-> 3 channel adapters the
// VAE needs to treat a depth map like an RGB image.

#include <array>
#include <span>

#include "depthdiff/image.hpp"

namespace depthdiff {

struct DepthRange {
  double d_min = 0.5;
  double d_max = 80.0;

  /// Throws ConfigError unless 0 < d_min < d_max, both finite.
  void validate() const;
};

enum class DepthEncoding { linear, log };

struct NormalizedDepth {
  Plane values;  // in [-1, 1]
  Mask valid;
  DepthEncoding encoding = DepthEncoding::log;
  DepthRange range;
};

/// clip(2x - 1, -1, 1)
inline double normalize_clip(double x) {
  const double y = 2.0 * x - 1.0;
  return y < -1.0 ? -1.0 : (y > 1.0 ? 1.0 : y);
}

template <typename Derived>
auto normalize_clip(const Eigen::ArrayBase<Derived>& x) {
  using S = typename Derived::Scalar;
  return (S(2) * x - S(1)).cwiseMax(S(-1)).cwiseMin(S(1));
}

double linear_encode(double depth, const DepthRange& range);
double log_encode(double depth, const DepthRange& range);
/// Inverse of log_encode; n is clipped to [-1, 1] first.
double log_decode(double n, const DepthRange& range);

/// Invalid pixels are encoded as -1 and stay masked.
NormalizedDepth linear_encode(const DepthMap& depth, const DepthRange& range);
/// Throws DataError naming the pixel if a valid depth is not positive and finite.
NormalizedDepth log_encode(const DepthMap& depth, const DepthRange& range);
/// Throws UsageError unless the input is log-encoded.
DepthMap log_decode(const NormalizedDepth& n);

/// Fraction of [-1, 1] occupied by the image of [lo, hi] under an encoding.
double encoded_interval_share(double lo, double hi, const DepthRange& range, DepthEncoding encoding);

std::array<Plane, 3> replicate_channels(const Plane& single);
/// Per-pixel arithmetic mean; throws DimensionError unless given exactly 3 equally sized planes.
Plane average_channels(std::span<const Plane> channels);

}  // namespace depthdiff
