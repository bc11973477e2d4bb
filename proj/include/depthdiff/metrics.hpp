#pragma once

#include <cstdint>
#include <optional>
#include <span>

#include "depthdiff/image.hpp"

namespace depthdiff {

struct MetricsReport {
  double abs_rel = 0;
  double rmse = 0;
  double delta1 = 0, delta2 = 0, delta3 = 0;
  std::int64_t valid_pixel_count = 0;
};

// Pixels count when gt is valid, finite, and positive (and, when d_max is given,
// gt <= d_max). Every function throws DataError when no pixel qualifies and
// DimensionError when extents differ.

double abs_rel(const DepthMap& pred, const DepthMap& gt, std::optional<double> d_max = std::nullopt);
double rmse(const DepthMap& pred, const DepthMap& gt, std::optional<double> d_max = std::nullopt);
/// Fraction of pixels with max(pred/gt, gt/pred) < 1.25^k.
double delta_acc(const DepthMap& pred, const DepthMap& gt, int k, std::optional<double> d_max = std::nullopt);

MetricsReport evaluate(const DepthMap& pred, const DepthMap& gt, std::optional<double> d_max = std::nullopt);

/// Unweighted mean of per-image reports; valid_pixel_count is summed.
MetricsReport mean_report(std::span<const MetricsReport> reports);

}  // namespace depthdiff
