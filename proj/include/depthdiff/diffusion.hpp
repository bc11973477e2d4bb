#pragma once

// Noise schedule, closed-form forward process, epsilon/v targets, and the
// deterministic DDIM sampler.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "depthdiff/autodiff.hpp"
#include "depthdiff/rng.hpp"
#include "depthdiff/unet.hpp"

namespace depthdiff {

struct NoiseSchedule {
  Eigen::VectorXd beta;
  Eigen::VectorXd alpha;
  Eigen::VectorXd alpha_bar;

  int steps() const { return static_cast<int>(beta.size()); }

  double signal(int t) const { return std::sqrt(alpha_bar(check(t))); }
  double noise(int t) const { return std::sqrt(1.0 - alpha_bar(check(t))); }

  int check(int t) const {
    if (t < 0 || t >= steps()) {
      throw UsageError("timestep " + std::to_string(t) + " outside [0, " + std::to_string(steps()) + ")");
    }
    return t;
  }
};

/// Linear beta from beta_start to beta_end over T steps; alpha_bar is the running product of 1 - beta.
inline NoiseSchedule make_schedule(int steps, double beta_start, double beta_end) {
  if (steps < 1) throw ConfigError("noise schedule needs at least one step");
  if (!(beta_start > 0 && beta_start <= beta_end && beta_end < 1)) {
    throw ConfigError("noise schedule requires 0 < beta_start <= beta_end < 1");
  }
  NoiseSchedule s;
  if (steps == 1) {
    s.beta = Eigen::VectorXd::Constant(1, beta_start);
  } else {
    s.beta = Eigen::VectorXd::LinSpaced(steps, beta_start, beta_end);
  }
  s.alpha = (1.0 - s.beta.array()).matrix();
  s.alpha_bar.resize(steps);
  double prod = 1.0;
  for (int t = 0; t < steps; ++t) {
    prod *= s.alpha(t);
    s.alpha_bar(t) = prod;
  }
  return s;
}

struct DiffusionConfig {
  int train_steps = 1000;
  double beta_start = 1e-4;
  double beta_end = 0.02;
  Objective objective = Objective::v;
  int ddim_steps = 50;
  int ensemble_size = 10;
  /// Bound applied to the predicted clean latent while sampling; <= 0 disables.
  double clip_latent = 3.0;

  void validate() const {
    if (train_steps < 1) throw ConfigError("diffusion: train_steps must be >= 1");
    if (ddim_steps < 1 || ddim_steps > train_steps) throw ConfigError("diffusion: ddim_steps must lie in [1, train_steps]");
    if (ensemble_size < 1) throw ConfigError("diffusion: ensemble_size must be >= 1");
  }

  NoiseSchedule schedule() const { return make_schedule(train_steps, beta_start, beta_end); }
};

/// d_t = sqrt(alpha_bar_t) d0 + sqrt(1 - alpha_bar_t) eps
template <typename Scalar>
ad::Vector<Scalar> forward_noise(const ad::Vector<Scalar>& d0, int t, const ad::Vector<Scalar>& eps,
                                 const NoiseSchedule& s) {
  if (d0.size() != eps.size()) throw DimensionError("forward_noise: latent and noise lengths differ");
  return Scalar(s.signal(t)) * d0 + Scalar(s.noise(t)) * eps;
}

/// v = sqrt(alpha_bar_t) eps - sqrt(1 - alpha_bar_t) d0
template <typename Scalar>
ad::Vector<Scalar> v_target(const ad::Vector<Scalar>& d0, const ad::Vector<Scalar>& eps, int t, const NoiseSchedule& s) {
  if (d0.size() != eps.size()) throw DimensionError("v_target: latent and noise lengths differ");
  return Scalar(s.signal(t)) * eps - Scalar(s.noise(t)) * d0;
}

/// d0 = sqrt(alpha_bar_t) d_t - sqrt(1 - alpha_bar_t) v
template <typename Scalar>
ad::Vector<Scalar> x0_from_v(const ad::Vector<Scalar>& d_t, const ad::Vector<Scalar>& v, int t, const NoiseSchedule& s) {
  return Scalar(s.signal(t)) * d_t - Scalar(s.noise(t)) * v;
}

/// eps = sqrt(alpha_bar_t) v + sqrt(1 - alpha_bar_t) d_t
template <typename Scalar>
ad::Vector<Scalar> eps_from_v(const ad::Vector<Scalar>& d_t, const ad::Vector<Scalar>& v, int t, const NoiseSchedule& s) {
  return Scalar(s.signal(t)) * v + Scalar(s.noise(t)) * d_t;
}

template <typename Scalar>
ad::Vector<Scalar> objective_target(Objective obj, const ad::Vector<Scalar>& d0, const ad::Vector<Scalar>& eps, int t,
                                    const NoiseSchedule& s) {
  return obj == Objective::v ? v_target(d0, eps, t, s) : eps;
}

/// Descending sampling grid: t_i = round(T - i * T / steps) - 1 for i in
/// [0, steps), deduplicated, with t = 0 dropped since it coincides with the
/// clean endpoint. Starts at T - 1; the step after the last grid entry lands on
/// the clean endpoint.
inline std::vector<int> ddim_timesteps(int train_steps, int steps) {
  if (steps < 1 || steps > train_steps) throw ConfigError("ddim_timesteps: steps must lie in [1, T]");
  std::vector<int> grid;
  if (train_steps == 1) return {0};
  const double stride = static_cast<double>(train_steps) / steps;
  for (int i = 0; i < steps; ++i) {
    const int t = static_cast<int>(std::lround(train_steps - i * stride)) - 1;
    if (t >= 1 && (grid.empty() || t < grid.back())) grid.push_back(t);
  }
  return grid;
}

/// Clean-latent and noise estimates at step t from a model output. The clean
/// estimate is clipped to [-clip, clip] when clip > 0 and the noise estimate is
/// made consistent with the clipped value.
template <typename Scalar>
std::pair<ad::Vector<Scalar>, ad::Vector<Scalar>> predict_clean(const ad::Vector<Scalar>& d_t, const ad::Vector<Scalar>& model_out,
                                                                int t, const NoiseSchedule& s, Objective obj, double clip = 0.0) {
  if (d_t.size() != model_out.size()) throw DimensionError("ddim: latent and model output lengths differ");
  const Scalar a = Scalar(s.signal(t));
  const Scalar b = Scalar(s.noise(t));
  ad::Vector<Scalar> x0;
  ad::Vector<Scalar> eps;
  if (obj == Objective::v) {
    x0 = a * d_t - b * model_out;
    eps = a * model_out + b * d_t;
  } else {
    eps = model_out;
    x0 = (d_t - b * model_out) / a;
  }
  if (clip > 0) {
    const ad::Vector<Scalar> clipped = x0.cwiseMax(Scalar(-clip)).cwiseMin(Scalar(clip));
    if (clipped != x0) {
      x0 = clipped;
      eps = (d_t - a * x0) / b;
    }
  }
  return {std::move(x0), std::move(eps)};
}

/// One deterministic (eta = 0) DDIM update from t to t_prev. t_prev = 0 denotes
/// the clean endpoint (alpha_bar = 1), so the step returns the predicted clean
/// latent itself.
template <typename Scalar>
ad::Vector<Scalar> ddim_step(const ad::Vector<Scalar>& d_t, const ad::Vector<Scalar>& model_out, int t, int t_prev,
                             const NoiseSchedule& s, Objective obj, double clip = 0.0) {
  if (!(t > t_prev && t_prev >= 0)) {
    throw UsageError("ddim_step requires t > t_prev >= 0, got t=" + std::to_string(t) + " t_prev=" + std::to_string(t_prev));
  }
  auto [x0, eps] = predict_clean(d_t, model_out, t, s, obj, clip);
  if (t_prev == 0) return x0;
  return Scalar(s.signal(t_prev)) * x0 + Scalar(s.noise(t_prev)) * eps;
}

/// Runs the full DDIM chain for every sample of `cond` ([N, Cc, h, w]).
/// The starting noise of sample n is drawn from Rng(seed) stream ("ddim/z_T", n).
/// `denoiser(z_concat, timesteps)` returns the model output for [z_t, cond].
template <typename Scalar, typename Denoiser>
ad::Tensor<Scalar> ddim_sample(const Denoiser& denoiser, const ad::Tensor<Scalar>& cond, int latent_channels,
                               const DiffusionConfig& cfg, const NoiseSchedule& s, std::uint64_t seed) {
  if (cond.rank() != 4) throw DimensionError("ddim_sample: condition must be NCHW, got " + ad::shape_str(cond.shape()));
  const int n = cond.dim(0), h = cond.dim(2), w = cond.dim(3);
  const Eigen::Index per = Eigen::Index{latent_channels} * h * w;
  auto z = ad::Tensor<Scalar>::zeros({n, latent_channels, h, w});
  const Rng base = Rng(seed).stream("ddim/z_T");
  for (int k = 0; k < n; ++k) {
    Rng r = base.stream(static_cast<std::uint64_t>(k));
    for (Eigen::Index i = 0; i < per; ++i) z.value()(Eigen::Index{k} * per + i) = Scalar(r.normal());
  }
  const auto grid = ddim_timesteps(s.steps(), cfg.ddim_steps);
  ad::Tape<Scalar> tape(false);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const int t = grid[i];
    const int t_prev = i + 1 < grid.size() ? grid[i + 1] : 0;
    const std::vector<int> ts(static_cast<std::size_t>(n), t);
    const auto out = denoiser(ad::concat_channels(tape, z, cond), std::span<const int>(ts));
    if (out.shape() != z.shape()) throw DimensionError("ddim_sample: denoiser output shape " + ad::shape_str(out.shape()));
    if (t == 0) {
      z.value() = predict_clean(z.value(), out.value(), t, s, cfg.objective, cfg.clip_latent).first;
    } else {
      z.value() = ddim_step(z.value(), out.value(), t, t_prev, s, cfg.objective, cfg.clip_latent);
    }
  }
  return z;
}

}  // namespace depthdiff
