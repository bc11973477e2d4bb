#pragma once

// Optimizer-step loops for the VAE stages and the latent denoiser.
//
// Every stochastic draw of a step is keyed by (step, sample slot) through
// labeled RNG streams, so a run is a pure function of (seed, data, step count):
// resuming from a checkpoint reproduces the uninterrupted trajectory, and
// splitting an effective batch into micro-batches changes nothing but the
// floating-point summation order.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "depthdiff/diffusion.hpp"
#include "depthdiff/optim.hpp"
#include "depthdiff/unet.hpp"
#include "depthdiff/vae.hpp"

namespace depthdiff {

enum class LrSchedule { constant, cosine };

inline std::string to_string(LrSchedule s) { return s == LrSchedule::cosine ? "cosine" : "constant"; }

inline LrSchedule lr_schedule_from_string(const std::string& s) {
  if (s == "constant") return LrSchedule::constant;
  if (s == "cosine") return LrSchedule::cosine;
  throw ConfigError("unknown learning-rate schedule '" + s + "' (expected constant or cosine)");
}

struct TrainConfig {
  std::int64_t iterations = 16000;
  int micro_batch = 2;
  int accumulation = 16;
  AdamConfig adam{};
  /// cosine anneals adam.lr towards zero over `iterations` steps.
  LrSchedule lr_schedule = LrSchedule::constant;
  bool hflip = true;
  int log_every = 100;
  int checkpoint_every = 1000;

  int effective_batch() const { return micro_batch * accumulation; }

  /// Optimizer settings for the step that follows `steps_done` completed steps.
  AdamConfig adam_at(std::int64_t steps_done) const {
    AdamConfig a = adam;
    if (lr_schedule == LrSchedule::cosine && iterations > 0) {
      const double progress = std::min(1.0, static_cast<double>(steps_done) / static_cast<double>(iterations));
      a.lr = adam.lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
    }
    return a;
  }

  void validate() const {
    if (iterations < 0 || micro_batch < 1 || accumulation < 1) throw ConfigError("train: invalid batch configuration");
    if (!(adam.lr > 0)) throw ConfigError("train: learning rate must be positive");
  }
};

/// Mirror every channel plane of a flat [C, H, W] array.
template <typename Scalar>
ad::Vector<Scalar> flip_chw(const ad::Vector<Scalar>& x, int c, int h, int w) {
  ad::Vector<Scalar> out(x.size());
  for (int k = 0; k < c; ++k) {
    for (int r = 0; r < h; ++r) {
      const Eigen::Index row = (Eigen::Index{k} * h + r) * w;
      out.segment(row, w) = x.segment(row, w).reverse();
    }
  }
  return out;
}

/// Paired latents, one entry per (scene, orientation). Orientation 1 holds the
/// latents of the horizontally flipped scene.
template <typename Scalar>
struct LatentDataset {
  int channels = 0, height = 0, width = 0;
  std::vector<ad::Vector<Scalar>> image[2];
  std::vector<ad::Vector<Scalar>> depth[2];

  std::size_t size() const { return depth[0].size(); }
  ad::Shape sample_shape(int n) const { return {n, channels, height, width}; }
};

/// MSE between the denoiser output and the objective target on noised inputs.
/// `eps` holds one noise array per sample, `t` one timestep per sample.
template <typename Scalar>
ad::Tensor<Scalar> training_loss(ad::Tape<Scalar>& tape, const UNet<Scalar>& model, const ad::Tensor<Scalar>& depth_latent,
                                 const ad::Tensor<Scalar>& image_latent, std::span<const int> t,
                                 const ad::Vector<Scalar>& eps, const NoiseSchedule& schedule) {
  const auto& ds = depth_latent.shape();
  const auto& is = image_latent.shape();
  if (ds.size() != 4 || is.size() != 4 || is[0] != ds[0] || is[2] != ds[2] || is[3] != ds[3] ||
      is[1] != model.config().cond_channels) {
    throw DimensionError("training_loss: image latent shape " + ad::shape_str(image_latent.shape()));
  }
  if (eps.size() != depth_latent.size()) throw DimensionError("training_loss: noise length differs from latent");
  const int n = depth_latent.dim(0);
  const Eigen::Index per = depth_latent.size() / n;
  auto noised = ad::Tensor<Scalar>::zeros(depth_latent.shape());
  auto target = ad::Tensor<Scalar>::zeros(depth_latent.shape());
  for (int s = 0; s < n; ++s) {
    const ad::Vector<Scalar> d0 = depth_latent.value().segment(Eigen::Index{s} * per, per);
    const ad::Vector<Scalar> e = eps.segment(Eigen::Index{s} * per, per);
    const int ts = t[static_cast<std::size_t>(s)];
    noised.value().segment(Eigen::Index{s} * per, per) = forward_noise(d0, ts, e, schedule);
    target.value().segment(Eigen::Index{s} * per, per) = objective_target(model.config().objective, d0, e, ts, schedule);
  }
  const auto out = model.forward(tape, ad::concat_channels(tape, noised, image_latent), t);
  return ad::mse_loss(tape, out, target);
}

template <typename Scalar>
class DiffusionTrainer {
 public:
  DiffusionTrainer(UNet<Scalar>& model, const DiffusionConfig& diffusion, const TrainConfig& train, std::uint64_t seed)
      : model_(model), diffusion_(diffusion), train_(train), schedule_(diffusion.schedule()), seed_(seed) {
    diffusion_.validate();
    train_.validate();
  }

  std::int64_t steps_done() const { return steps_; }
  void set_steps_done(std::int64_t s) { steps_ = s; }
  const NoiseSchedule& schedule() const { return schedule_; }

  /// One optimizer step over micro_batch * accumulation samples. Returns the
  /// mean loss over the effective batch.
  double step(const LatentDataset<Scalar>& data) {
    if (data.size() == 0) throw DataError("diffusion training: empty dataset");
    if (data.channels != model_.config().latent_channels) throw ConfigError("diffusion training: latent channel mismatch");
    const int mb = train_.micro_batch;
    const int eff = train_.effective_batch();
    const Eigen::Index per = Eigen::Index{data.channels} * data.height * data.width;
    const Rng base = Rng(seed_).stream("unet/sample");

    model_.params().zero_grad();
    double total = 0;
    for (int m = 0; m < train_.accumulation; ++m) {
      auto zd = ad::Tensor<Scalar>::zeros(data.sample_shape(mb));
      auto zx = ad::Tensor<Scalar>::zeros(data.sample_shape(mb));
      ad::Vector<Scalar> eps(per * mb);
      std::vector<int> ts(static_cast<std::size_t>(mb));
      for (int j = 0; j < mb; ++j) {
        const auto key = static_cast<std::uint64_t>(steps_ * eff + m * mb + j);
        const Rng r = base.stream(key);
        Rng rd = r.stream("data"), rf = r.stream("hflip"), rt = r.stream("timestep"), re = r.stream("noise");
        const auto idx = static_cast<std::size_t>(rd.uniform_int(static_cast<std::int64_t>(data.size())));
        const int flip = train_.hflip && rf.coin() ? 1 : 0;
        zd.value().segment(Eigen::Index{j} * per, per) = data.depth[flip][idx];
        zx.value().segment(Eigen::Index{j} * per, per) = data.image[flip][idx];
        ts[static_cast<std::size_t>(j)] = static_cast<int>(rt.uniform_int(schedule_.steps()));
        for (Eigen::Index i = 0; i < per; ++i) eps(Eigen::Index{j} * per + i) = Scalar(re.normal());
      }
      ad::Tape<Scalar> tape;
      auto loss = training_loss(tape, model_, zd, zx, std::span<const int>(ts), eps, schedule_);
      total += static_cast<double>(loss.item());
      loss = ad::scale(tape, loss, Scalar(1) / Scalar(train_.accumulation));
      tape.backward(loss);
    }
    adam_step(model_.params().params(), train_.adam_at(steps_));
    ++steps_;
    return total / train_.accumulation;
  }

 private:
  UNet<Scalar>& model_;
  DiffusionConfig diffusion_;
  TrainConfig train_;
  NoiseSchedule schedule_;
  std::uint64_t seed_;
  std::int64_t steps_ = 0;
};

/// VAE inputs as flat [C, H, W] arrays in [-1, 1] with per-element weights
/// (1 valid, 0 masked).
template <typename Scalar>
struct VaeDataset {
  int channels = 3, height = 0, width = 0;
  std::vector<ad::Vector<Scalar>> inputs;
  std::vector<ad::Vector<Scalar>> masks;

  std::size_t size() const { return inputs.size(); }
};

template <typename Scalar>
class VaeTrainer {
 public:
  VaeTrainer(Vae<Scalar>& model, const TrainConfig& train, std::uint64_t seed, std::string stage)
      : model_(model), train_(train), seed_(seed), stage_(std::move(stage)) {
    train_.validate();
  }

  std::int64_t steps_done() const { return steps_; }
  void set_steps_done(std::int64_t s) { steps_ = s; }

  double step(const VaeDataset<Scalar>& data) {
    if (data.size() == 0) throw DataError("vae training: empty dataset");
    const int mb = train_.micro_batch;
    const int eff = train_.effective_batch();
    const Eigen::Index per = Eigen::Index{data.channels} * data.height * data.width;
    const auto& cfg = model_.config();
    const Eigen::Index latent_per =
        Eigen::Index{cfg.latent_channels} * (data.height / cfg.downsample_factor) * (data.width / cfg.downsample_factor);
    const Rng base = Rng(seed_).stream("vae/" + stage_);

    model_.params().zero_grad();
    double total = 0;
    for (int m = 0; m < train_.accumulation; ++m) {
      auto x = ad::Tensor<Scalar>::zeros({mb, data.channels, data.height, data.width});
      ad::Vector<Scalar> mask(per * mb);
      ad::Vector<Scalar> noise(latent_per * mb);
      for (int j = 0; j < mb; ++j) {
        const auto key = static_cast<std::uint64_t>(steps_ * eff + m * mb + j);
        const Rng r = base.stream(key);
        Rng rd = r.stream("data"), rf = r.stream("hflip"), rn = r.stream("noise");
        const auto idx = static_cast<std::size_t>(rd.uniform_int(static_cast<std::int64_t>(data.size())));
        const bool flip = train_.hflip && rf.coin();
        const auto& in = data.inputs[idx];
        const auto& mk = data.masks[idx];
        x.value().segment(Eigen::Index{j} * per, per) = flip ? flip_chw(in, data.channels, data.height, data.width) : in;
        mask.segment(Eigen::Index{j} * per, per) = flip ? flip_chw(mk, data.channels, data.height, data.width) : mk;
        for (Eigen::Index i = 0; i < latent_per; ++i) noise(Eigen::Index{j} * latent_per + i) = Scalar(rn.normal());
      }
      ad::Tape<Scalar> tape;
      const auto dist = model_.encode(tape, x);
      const auto z = reparameterize(tape, dist, noise);
      auto loss = vae_loss(tape, x, model_.decode(tape, z), dist, cfg.kl_weight, &mask);
      total += static_cast<double>(loss.item());
      loss = ad::scale(tape, loss, Scalar(1) / Scalar(train_.accumulation));
      tape.backward(loss);
    }
    adam_step(model_.params().params(), train_.adam_at(steps_));
    ++steps_;
    return total / train_.accumulation;
  }

 private:
  Vae<Scalar>& model_;
  TrainConfig train_;
  std::uint64_t seed_;
  std::string stage_;
  std::int64_t steps_ = 0;
};

}  // namespace depthdiff
