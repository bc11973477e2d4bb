#pragma once

// Image -> metric depth: encode, sample the depth latent, decode, and undo the
// log codec. The ensemble runs one sampling per seed and reduces per pixel in
// metric space.

#include <algorithm>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "depthdiff/depth_codec.hpp"
#include "depthdiff/diffusion.hpp"
#include "depthdiff/image.hpp"
#include "depthdiff/unet.hpp"
#include "depthdiff/vae.hpp"

namespace depthdiff {

enum class Aggregation { median, mean };

inline std::string to_string(Aggregation a) { return a == Aggregation::median ? "median" : "mean"; }

inline Aggregation aggregation_from_string(const std::string& s) {
  if (s == "median") return Aggregation::median;
  if (s == "mean") return Aggregation::mean;
  throw ConfigError("unknown aggregation '" + s + "' (expected median or mean)");
}

/// Everything inference needs. Latents are multiplied by the scale of their VAE
/// before entering the denoiser and divided by it before decoding.
template <typename Scalar>
struct DepthModel {
  const Vae<Scalar>& image_vae;
  const Vae<Scalar>& depth_vae;
  const UNet<Scalar>& unet;
  double image_scale = 1.0;
  double depth_scale = 1.0;
  DepthRange range{};
  DiffusionConfig diffusion{};

  /// Throws ConfigError when the VAEs and the denoiser disagree on latent layout.
  void validate() const {
    const auto& ic = image_vae.config();
    const auto& dc = depth_vae.config();
    const auto& uc = unet.config();
    if (ic.downsample_factor != dc.downsample_factor || ic.latent_channels != uc.cond_channels ||
        dc.latent_channels != uc.latent_channels) {
      throw ConfigError("depth model: VAE latents (image " + std::to_string(ic.latent_channels) + ", depth " +
                        std::to_string(dc.latent_channels) + ") do not match the denoiser (cond " +
                        std::to_string(uc.cond_channels) + ", latent " + std::to_string(uc.latent_channels) + ")");
    }
    if (!(image_scale > 0) || !(depth_scale > 0)) throw ConfigError("depth model: latent scales must be positive");
    range.validate();
    diffusion.validate();
  }
};

struct EnsembleResult {
  DepthMap depth;
  Plane uncertainty;
  std::vector<Plane> members;
};

/// Scaled mean latent of one image: [1, C, h, w].
template <typename Scalar>
ad::Tensor<Scalar> encode_condition(const DepthModel<Scalar>& m, const RgbImage& image) {
  m.image_vae.config().check_extent(image.height(), image.width());
  ad::Tape<Scalar> tape(false);
  auto mean = m.image_vae.encode(tape, rgb_batch<Scalar>(std::span(&image, 1))).mean;
  return ad::Tensor<Scalar>(mean.shape(), mean.value() * Scalar(m.image_scale));
}

/// Decodes a scaled depth latent [1, C, h, w] to meters.
template <typename Scalar>
Plane decode_depth(const DepthModel<Scalar>& m, const ad::Tensor<Scalar>& latent) {
  ad::Tape<Scalar> tape(false);
  const ad::Tensor<Scalar> z(latent.shape(), latent.value() / Scalar(m.depth_scale));
  const auto planes = tensor_planes(m.depth_vae.decode(tape, z), 0);
  const DepthRange range = m.range;
  return average_channels(planes).cwiseMax(-1.0).cwiseMin(1.0).unaryExpr([range](double n) { return log_decode(n, range); });
}

template <typename Scalar>
Plane sample_member(const DepthModel<Scalar>& m, const ad::Tensor<Scalar>& cond, std::uint64_t seed) {
  const auto denoise = [&m](const ad::Tensor<Scalar>& z, std::span<const int> t) {
    ad::Tape<Scalar> tape(false);
    return m.unet.forward(tape, z, t);
  };
  const auto z0 = ddim_sample<Scalar>(denoise, cond, m.unet.config().latent_channels, m.diffusion,
                                      m.diffusion.schedule(), seed);
  return decode_depth(m, z0);
}

template <typename Scalar>
DepthMap infer_once(const DepthModel<Scalar>& m, const RgbImage& image, std::uint64_t seed) {
  m.validate();
  const Plane d = sample_member(m, encode_condition(m, image), seed);
  return DepthMap{d, Mask::Constant(d.rows(), d.cols(), true)};
}

/// Linearly interpolated quantile of a sorted sample.
inline double sorted_quantile(std::span<const double> v, double q) {
  const double pos = q * static_cast<double>(v.size() - 1);
  const auto lo = static_cast<std::size_t>(pos);
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

/// Per-pixel reduction of member maps into (aggregate, interquartile range).
inline std::pair<Plane, Plane> aggregate_members(std::span<const Plane> members, Aggregation how) {
  if (members.empty()) throw UsageError("aggregate_members: need at least one member");
  const auto rows = members[0].rows(), cols = members[0].cols();
  for (const auto& p : members) {
    if (p.rows() != rows || p.cols() != cols) throw DimensionError("aggregate_members: member extents differ");
  }
  Plane agg(rows, cols), iqr(rows, cols);
  std::vector<double> v(members.size());
  for (Eigen::Index i = 0; i < rows * cols; ++i) {
    for (std::size_t k = 0; k < members.size(); ++k) v[k] = members[k].data()[i];
    std::sort(v.begin(), v.end());
    if (how == Aggregation::median) {
      agg.data()[i] = sorted_quantile(v, 0.5);
    } else {
      double s = 0;
      for (double x : v) s += x;
      agg.data()[i] = s / static_cast<double>(v.size());
    }
    iqr.data()[i] = sorted_quantile(v, 0.75) - sorted_quantile(v, 0.25);
  }
  return {std::move(agg), std::move(iqr)};
}

template <typename Scalar>
EnsembleResult infer_ensemble(const DepthModel<Scalar>& m, const RgbImage& image, std::uint64_t base_seed, int n,
                              Aggregation how = Aggregation::median, bool keep_members = false) {
  if (n < 1) throw UsageError("infer_ensemble: n must be >= 1, got " + std::to_string(n));
  m.validate();
  const auto cond = encode_condition(m, image);
  std::vector<Plane> members;
  members.reserve(static_cast<std::size_t>(n));
  for (int k = 0; k < n; ++k) members.push_back(sample_member(m, cond, base_seed + static_cast<std::uint64_t>(k)));
  auto [agg, iqr] = aggregate_members(members, how);
  EnsembleResult r{DepthMap{agg, Mask::Constant(agg.rows(), agg.cols(), true)}, std::move(iqr), {}};
  if (keep_members) r.members = std::move(members);
  return r;
}

}  // namespace depthdiff
