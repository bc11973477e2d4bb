#include "depthdiff/depth_codec.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "depthdiff/errors.hpp"

namespace depthdiff {

void DepthRange::validate() const {
  if (!std::isfinite(d_min) || !std::isfinite(d_max) || !(d_min > 0.0) || !(d_max > d_min)) {
    throw ConfigError("depth range requires 0 < d_min < d_max, got d_min=" + std::to_string(d_min) +
                      " d_max=" + std::to_string(d_max));
  }
}

double linear_encode(double depth, const DepthRange& range) {
  return normalize_clip((depth - range.d_min) / (range.d_max - range.d_min));
}

double log_encode(double depth, const DepthRange& range) {
  return normalize_clip(std::log(depth / range.d_min) / std::log(range.d_max / range.d_min));
}

double log_decode(double n, const DepthRange& range) {
  const double c = n < -1.0 ? -1.0 : (n > 1.0 ? 1.0 : n);
  return range.d_min * std::pow(range.d_max / range.d_min, (c + 1.0) / 2.0);
}

namespace {

template <typename Encode>
NormalizedDepth encode_map(const DepthMap& depth, const DepthRange& range, DepthEncoding kind, Encode encode) {
  range.validate();
  NormalizedDepth out{Plane(depth.values.rows(), depth.values.cols()), depth.valid, kind, range};
  for (Eigen::Index r = 0; r < depth.values.rows(); ++r) {
    for (Eigen::Index c = 0; c < depth.values.cols(); ++c) {
      out.values(r, c) = depth.valid(r, c) ? encode(depth.values(r, c), r, c) : -1.0;
    }
  }
  return out;
}

}  // namespace

NormalizedDepth linear_encode(const DepthMap& depth, const DepthRange& range) {
  return encode_map(depth, range, DepthEncoding::linear,
                    [&](double d, Eigen::Index, Eigen::Index) { return linear_encode(d, range); });
}

NormalizedDepth log_encode(const DepthMap& depth, const DepthRange& range) {
  return encode_map(depth, range, DepthEncoding::log, [&](double d, Eigen::Index r, Eigen::Index c) {
    if (!(d > 0.0) || !std::isfinite(d)) {
      throw DataError("log_encode: nonpositive depth " + std::to_string(d) + " at pixel (row " + std::to_string(r) +
                      ", col " + std::to_string(c) + ")");
    }
    return log_encode(d, range);
  });
}

DepthMap log_decode(const NormalizedDepth& n) {
  if (n.encoding != DepthEncoding::log) throw UsageError("log_decode: input is not log-encoded");
  n.range.validate();
  DepthMap out{Plane(n.values.rows(), n.values.cols()), n.valid};
  for (Eigen::Index i = 0; i < n.values.size(); ++i) {
    out.values.data()[i] = n.valid.data()[i] ? log_decode(n.values.data()[i], n.range) : 0.0;
  }
  return out;
}

double encoded_interval_share(double lo, double hi, const DepthRange& range, DepthEncoding encoding) {
  const auto enc = [&](double d) {
    return encoding == DepthEncoding::log ? log_encode(d, range) : linear_encode(d, range);
  };
  return (enc(hi) - enc(lo)) / 2.0;
}

std::array<Plane, 3> replicate_channels(const Plane& single) { return {single, single, single}; }

Plane average_channels(std::span<const Plane> channels) {
  if (channels.size() != 3) {
    throw DimensionError("average_channels: expected 3 channels, got " + std::to_string(channels.size()));
  }
  for (const auto& c : channels) {
    if (c.rows() != channels[0].rows() || c.cols() != channels[0].cols()) {
      throw DimensionError("average_channels: channel extents differ");
    }
  }
  // Sorted per pixel so the result is independent of channel order and exact for equal channels.
  Plane out(channels[0].rows(), channels[0].cols());
  for (Eigen::Index i = 0; i < out.size(); ++i) {
    std::array<double, 3> v{channels[0].data()[i], channels[1].data()[i], channels[2].data()[i]};
    std::sort(v.begin(), v.end());
    out.data()[i] = v[0] + ((v[1] - v[0]) + (v[2] - v[0])) / 3.0;
  }
  return out;
}

}  // namespace depthdiff
