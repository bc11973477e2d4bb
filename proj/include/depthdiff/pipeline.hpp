#pragma once

// End-to-end training flow shared by the CLI and the acceptance suite:
// scenes -> VAE inputs -> (image VAE, depth VAE) -> scaled latents -> denoiser.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <functional>
#include <ostream>
#include <span>
#include <vector>

#include "depthdiff/dataset.hpp"
#include "depthdiff/depth_codec.hpp"
#include "depthdiff/ensemble.hpp"
#include "depthdiff/training.hpp"

namespace depthdiff {

enum class VaeStage { image, depth };

inline std::string to_string(VaeStage s) { return s == VaeStage::image ? "image" : "depth"; }

inline VaeStage vae_stage_from_string(const std::string& s) {
  if (s == "image") return VaeStage::image;
  if (s == "depth") return VaeStage::depth;
  throw UsageError("unknown VAE stage '" + s + "' (expected image or depth)");
}

/// VAE inputs for one stage. Image stage: 2 * rgb - 1. Depth stage: log-encoded
/// depth replicated on three channels, with invalid pixels masked out.
template <typename Scalar>
VaeDataset<Scalar> vae_dataset(std::span<const SceneSample> samples, VaeStage stage, const DepthRange& range) {
  if (samples.empty()) throw DataError("vae_dataset: no samples");
  VaeDataset<Scalar> d;
  d.channels = 3;
  d.height = samples[0].rgb.height();
  d.width = samples[0].rgb.width();
  const Eigen::Index hw = Eigen::Index{d.height} * d.width;
  for (const auto& s : samples) {
    if (s.rgb.height() != d.height || s.rgb.width() != d.width) throw DimensionError("vae_dataset: mixed scene extents");
    ad::Vector<Scalar> x(3 * hw), m(3 * hw);
    if (stage == VaeStage::image) {
      for (int c = 0; c < 3; ++c) {
        for (Eigen::Index i = 0; i < hw; ++i) x(c * hw + i) = Scalar(2.0 * s.rgb.channels[c].data()[i] - 1.0);
      }
      m.setOnes();
    } else {
      const auto enc = log_encode(s.depth, range);
      for (int c = 0; c < 3; ++c) {
        for (Eigen::Index i = 0; i < hw; ++i) {
          x(c * hw + i) = Scalar(enc.values.data()[i]);
          m(c * hw + i) = enc.valid.data()[i] ? Scalar(1) : Scalar(0);
        }
      }
    }
    d.inputs.push_back(std::move(x));
    d.masks.push_back(std::move(m));
  }
  return d;
}

/// Runs trainer.step until `cfg.iterations` total steps, logging every
/// cfg.log_every steps and calling `checkpoint` every cfg.checkpoint_every steps
/// and after the last one. Returns the per-step losses of this call.
template <typename Trainer, typename Data>
std::vector<double> train_loop(Trainer& trainer, const Data& data, const TrainConfig& cfg, std::ostream* log,
                               const std::function<void(std::int64_t)>& checkpoint = {}) {
  std::vector<double> losses;
  using clock = std::chrono::steady_clock;
  const auto start = clock::now();
  auto window_start = start;
  std::int64_t window_steps = 0;
  double window_loss = 0;
  while (trainer.steps_done() < cfg.iterations) {
    const double loss = trainer.step(data);
    losses.push_back(loss);
    window_loss += loss;
    ++window_steps;
    const std::int64_t s = trainer.steps_done();
    if (log != nullptr && (s % cfg.log_every == 0 || s == cfg.iterations)) {
      const auto now = clock::now();
      const double dt = std::chrono::duration<double>(now - window_start).count();
      const double total = std::chrono::duration<double>(now - start).count();
      *log << "step " << s << " loss " << window_loss / static_cast<double>(window_steps) << " elapsed_s " << total
           << " steps_per_s " << (dt > 0 ? static_cast<double>(window_steps) / dt : 0.0) << std::endl;
      window_start = now;
      window_steps = 0;
      window_loss = 0;
    }
    if (checkpoint && (s % cfg.checkpoint_every == 0 || s == cfg.iterations)) checkpoint(s);
  }
  return losses;
}

/// Encoder latents of every input, optionally of its mirror image. Mean latents
/// unless `sample` is set, in which case draws come from stream ("encode", i).
template <typename Scalar>
std::vector<ad::Vector<Scalar>> encode_latents(const Vae<Scalar>& vae, const VaeDataset<Scalar>& data, bool flipped,
                                               bool sample, std::uint64_t seed, int batch = 8) {
  std::vector<ad::Vector<Scalar>> out;
  out.reserve(data.size());
  const Eigen::Index per = Eigen::Index{data.channels} * data.height * data.width;
  for (std::size_t start = 0; start < data.size(); start += static_cast<std::size_t>(batch)) {
    const int n = static_cast<int>(std::min<std::size_t>(static_cast<std::size_t>(batch), data.size() - start));
    auto x = ad::Tensor<Scalar>::zeros({n, data.channels, data.height, data.width});
    for (int j = 0; j < n; ++j) {
      const auto& in = data.inputs[start + static_cast<std::size_t>(j)];
      x.value().segment(Eigen::Index{j} * per, per) = flipped ? flip_chw(in, data.channels, data.height, data.width) : in;
    }
    ad::Tape<Scalar> tape(false);
    const auto dist = vae.encode(tape, x);
    const Eigen::Index lp = dist.mean.size() / n;
    for (int j = 0; j < n; ++j) {
      ad::Vector<Scalar> z = dist.mean.value().segment(Eigen::Index{j} * lp, lp);
      if (sample) {
        Rng r = Rng(seed).stream("encode").stream(static_cast<std::uint64_t>(start) + static_cast<std::uint64_t>(j));
        const ad::Vector<Scalar> lv = dist.logvar.value().segment(Eigen::Index{j} * lp, lp);
        for (Eigen::Index i = 0; i < lp; ++i) {
          const double l = std::clamp(static_cast<double>(lv(i)), ad::kLogvarMin, ad::kLogvarMax);
          z(i) += Scalar(std::exp(0.5 * l) * r.normal());
        }
      }
      out.push_back(std::move(z));
    }
  }
  return out;
}

/// 1 / (global standard deviation) over all latent entries.
template <typename Scalar>
double latent_scale(std::span<const ad::Vector<Scalar>> latents) {
  double n = 0, sum = 0, sq = 0;
  for (const auto& z : latents) {
    for (Eigen::Index i = 0; i < z.size(); ++i) {
      const double v = static_cast<double>(z(i));
      sum += v;
      sq += v * v;
      ++n;
    }
  }
  if (n < 2) throw DataError("latent_scale: need at least two latent values");
  const double mean = sum / n;
  const double var = std::max(sq / n - mean * mean, 0.0);
  if (!(var > 0)) throw NumericError("latent_scale: latents have zero variance");
  return 1.0 / std::sqrt(var);
}

/// Scaled (image, depth) latent pairs for both orientations.
template <typename Scalar>
LatentDataset<Scalar> latent_dataset(const Vae<Scalar>& image_vae, const Vae<Scalar>& depth_vae,
                                     const VaeDataset<Scalar>& images, const VaeDataset<Scalar>& depths,
                                     double image_scale, double depth_scale, std::uint64_t seed) {
  if (images.size() != depths.size()) throw DataError("latent_dataset: image and depth counts differ");
  const auto& vc = image_vae.config();
  LatentDataset<Scalar> d;
  d.channels = vc.latent_channels;
  d.height = images.height / vc.downsample_factor;
  d.width = images.width / vc.downsample_factor;
  for (int f = 0; f < 2; ++f) {
    const Rng r = Rng(seed).stream(f == 0 ? "latents" : "latents/flipped");
    d.image[f] = encode_latents(image_vae, images, f == 1, vc.sample_latent, r.stream("image").next_u64());
    d.depth[f] = encode_latents(depth_vae, depths, f == 1, depth_vae.config().sample_latent, r.stream("depth").next_u64());
    for (auto& z : d.image[f]) z *= Scalar(image_scale);
    for (auto& z : d.depth[f]) z *= Scalar(depth_scale);
  }
  return d;
}

}  // namespace depthdiff
