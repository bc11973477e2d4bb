#include "depthdiff/metrics.hpp"

#include <cmath>
#include <string>

#include "depthdiff/errors.hpp"

namespace depthdiff {

namespace {

Mask evaluation_mask(const DepthMap& pred, const DepthMap& gt, std::optional<double> d_max) {
  if (pred.values.rows() != gt.values.rows() || pred.values.cols() != gt.values.cols()) {
    throw DimensionError("metrics: prediction is " + std::to_string(pred.height()) + "x" + std::to_string(pred.width()) +
                         ", ground truth is " + std::to_string(gt.height()) + "x" + std::to_string(gt.width()));
  }
  Mask m = gt.valid && gt.values.isFinite() && (gt.values > 0.0);
  if (d_max) m = m && (gt.values <= *d_max);
  if (!m.any()) throw DataError("metrics: no valid ground-truth pixels");
  return m;
}

}  // namespace

double abs_rel(const DepthMap& pred, const DepthMap& gt, std::optional<double> d_max) {
  const Mask m = evaluation_mask(pred, gt, d_max);
  const Plane rel = ((pred.values - gt.values).abs() / gt.values.max(1e-300));
  return m.select(rel, 0.0).sum() / static_cast<double>(m.count());
}

double rmse(const DepthMap& pred, const DepthMap& gt, std::optional<double> d_max) {
  const Mask m = evaluation_mask(pred, gt, d_max);
  return std::sqrt(m.select((pred.values - gt.values).square(), 0.0).sum() / static_cast<double>(m.count()));
}

double delta_acc(const DepthMap& pred, const DepthMap& gt, int k, std::optional<double> d_max) {
  if (k < 1) throw UsageError("delta_acc: k must be >= 1");
  const Mask m = evaluation_mask(pred, gt, d_max);
  const double thr = std::pow(1.25, k);
  std::int64_t hit = 0;
  for (Eigen::Index i = 0; i < m.size(); ++i) {
    if (!m.data()[i]) continue;
    const double p = pred.values.data()[i], g = gt.values.data()[i];
    if (p > 0 && std::max(p / g, g / p) < thr) ++hit;
  }
  return static_cast<double>(hit) / static_cast<double>(m.count());
}

MetricsReport evaluate(const DepthMap& pred, const DepthMap& gt, std::optional<double> d_max) {
  MetricsReport r;
  r.abs_rel = abs_rel(pred, gt, d_max);
  r.rmse = rmse(pred, gt, d_max);
  r.delta1 = delta_acc(pred, gt, 1, d_max);
  r.delta2 = delta_acc(pred, gt, 2, d_max);
  r.delta3 = delta_acc(pred, gt, 3, d_max);
  r.valid_pixel_count = evaluation_mask(pred, gt, d_max).count();
  return r;
}

MetricsReport mean_report(std::span<const MetricsReport> reports) {
  if (reports.empty()) throw DataError("mean_report: no reports");
  MetricsReport m;
  for (const auto& r : reports) {
    m.abs_rel += r.abs_rel;
    m.rmse += r.rmse;
    m.delta1 += r.delta1;
    m.delta2 += r.delta2;
    m.delta3 += r.delta3;
    m.valid_pixel_count += r.valid_pixel_count;
  }
  const double n = static_cast<double>(reports.size());
  m.abs_rel /= n;
  m.rmse /= n;
  m.delta1 /= n;
  m.delta2 /= n;
  m.delta3 /= n;
  return m;
}

}  // namespace depthdiff
