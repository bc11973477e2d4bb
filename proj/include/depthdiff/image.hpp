#pragma once

#include <Eigen/Dense>

#include <array>

namespace depthdiff {

/// Row-major H x W plane; row 0 is the top of the image.
using Plane = Eigen::Array<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Mask = Eigen::Array<bool, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Metric depth in meters with a validity mask. Valid pixels hold finite, positive depth.
struct DepthMap {
  Plane values;
  Mask valid;

  int height() const { return static_cast<int>(values.rows()); }
  int width() const { return static_cast<int>(values.cols()); }

  /// Fully valid map.
  static DepthMap dense(Plane v) {
    DepthMap d{std::move(v), {}};
    d.valid = Mask::Constant(d.values.rows(), d.values.cols(), true);
    return d;
  }
};

/// Planar RGB with channel values in [0, 1].
struct RgbImage {
  std::array<Plane, 3> channels;

  int height() const { return static_cast<int>(channels[0].rows()); }
  int width() const { return static_cast<int>(channels[0].cols()); }

  static RgbImage zeros(int h, int w) {
    RgbImage img;
    for (auto& c : img.channels) c = Plane::Zero(h, w);
    return img;
  }
};

/// Mirror about the vertical axis.
template <typename Derived>
auto hflip(const Eigen::DenseBase<Derived>& a) {
  return a.rowwise().reverse();
}

}  // namespace depthdiff
