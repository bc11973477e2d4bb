#pragma once

// Shared test helpers: a central-difference gradient checker, the catalogue of
// differentiable ops it is applied to, and a tiny U-Net fixture.

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "depthdiff/training.hpp"

namespace depthdiff::testing {

using T64 = ad::Tensor<double>;
using Fn = std::function<T64(ad::Tape<double>&, const std::vector<T64>&)>;

inline ad::Vector<double> random_vector(Eigen::Index n, Rng& rng, double lo = -1, double hi = 1) {
  ad::Vector<double> v(n);
  for (Eigen::Index i = 0; i < n; ++i) v(i) = rng.uniform(lo, hi);
  return v;
}

inline T64 random_tensor(ad::Shape shape, Rng& rng, double lo = -1, double hi = 1) {
  const auto n = ad::numel(shape);
  return T64(std::move(shape), random_vector(n, rng, lo, hi), true);
}

/// ||a - n|| / max(||a||, ||n||) per input, maximized over inputs.
/// `f` must return a scalar.
inline double gradient_error(const Fn& f, std::vector<T64>& inputs, double h = 1e-6) {
  for (auto& x : inputs) x.zero_grad();
  {
    ad::Tape<double> tape;
    tape.backward(f(tape, inputs));
  }
  double worst = 0;
  for (auto& x : inputs) {
    const ad::Vector<double> analytic = x.grad();
    ad::Vector<double> numeric(x.size());
    for (Eigen::Index i = 0; i < x.size(); ++i) {
      const double keep = x.value()(i);
      ad::Tape<double> off(false);
      x.value()(i) = keep + h;
      const double up = f(off, inputs).item();
      x.value()(i) = keep - h;
      const double down = f(off, inputs).item();
      x.value()(i) = keep;
      numeric(i) = (up - down) / (2 * h);
    }
    const double scale = std::max({analytic.norm(), numeric.norm(), 1e-300});
    worst = std::max(worst, (analytic - numeric).norm() / scale);
  }
  return worst;
}

struct OpCase {
  std::string name;
  std::vector<ad::Shape> input_shapes;
  Fn fn;
  double lo = -1, hi = 1;
};

/// Reduces a tensor to a scalar through a fixed random weighting so that every
/// output element carries a distinct cotangent.
inline T64 project(ad::Tape<double>& tape, const T64& y) {
  Rng r(0xfeed);
  const T64 w(y.shape(), random_vector(y.size(), r));
  return ad::sum(tape, ad::mul(tape, y, w));
}

inline std::vector<OpCase> op_catalog() {
  using V = const std::vector<T64>&;
  using Tp = ad::Tape<double>&;
  std::vector<OpCase> ops;
  ops.push_back({"conv2d 3x3 stride 1",
                 {{2, 3, 5, 5}, {4, 3, 3, 3}, {4}},
                 [](Tp t, V x) { return project(t, ad::conv2d(t, x[0], x[1], x[2], 1, 1)); }});
  ops.push_back({"conv2d 3x3 stride 2",
                 {{2, 2, 6, 6}, {3, 2, 3, 3}, {3}},
                 [](Tp t, V x) { return project(t, ad::conv2d(t, x[0], x[1], x[2], 2, 1)); }});
  ops.push_back({"conv2d 1x1",
                 {{1, 3, 4, 4}, {2, 3, 1, 1}, {2}},
                 [](Tp t, V x) { return project(t, ad::conv2d(t, x[0], x[1], x[2], 1, 0)); }});
  ops.push_back({"linear", {{3, 5}, {4, 5}, {4}}, [](Tp t, V x) { return project(t, ad::linear(t, x[0], x[1], x[2])); }});
  ops.push_back({"silu", {{2, 3, 4}}, [](Tp t, V x) { return project(t, ad::silu(t, x[0])); }, -4, 4});
  ops.push_back({"tanh", {{2, 3, 4}}, [](Tp t, V x) { return project(t, ad::tanh(t, x[0])); }, -2, 2});
  ops.push_back({"group_norm",
                 {{2, 4, 3, 3}, {4}, {4}},
                 [](Tp t, V x) { return project(t, ad::group_norm(t, x[0], 2, x[1], x[2], 1e-5)); }});
  ops.push_back({"upsample_nearest2x", {{1, 2, 3, 3}}, [](Tp t, V x) { return project(t, ad::upsample_nearest2x(t, x[0])); }});
  ops.push_back({"avg_pool2x", {{1, 2, 4, 4}}, [](Tp t, V x) { return project(t, ad::avg_pool2x(t, x[0])); }});
  ops.push_back({"concat_channels",
                 {{2, 2, 3, 3}, {2, 3, 3, 3}},
                 [](Tp t, V x) { return project(t, ad::concat_channels(t, x[0], x[1])); }});
  ops.push_back({"slice_channels", {{2, 5, 2, 2}}, [](Tp t, V x) { return project(t, ad::slice_channels(t, x[0], 1, 4)); }});
  ops.push_back({"add", {{3, 4}, {3, 4}}, [](Tp t, V x) { return project(t, ad::add(t, x[0], x[1])); }});
  ops.push_back({"sub", {{3, 4}, {3, 4}}, [](Tp t, V x) { return project(t, ad::sub(t, x[0], x[1])); }});
  ops.push_back({"mul", {{3, 4}, {3, 4}}, [](Tp t, V x) { return project(t, ad::mul(t, x[0], x[1])); }});
  ops.push_back({"scale", {{3, 4}}, [](Tp t, V x) { return project(t, ad::scale(t, x[0], -1.7)); }});
  ops.push_back({"add_channel_bias",
                 {{2, 3, 2, 2}, {2, 3}},
                 [](Tp t, V x) { return project(t, ad::add_channel_bias(t, x[0], x[1])); }});
  ops.push_back({"sum", {{2, 3}}, [](Tp t, V x) { return ad::sum(t, ad::mul(t, x[0], x[0])); }});
  ops.push_back({"mean", {{2, 3}}, [](Tp t, V x) { return ad::mean(t, ad::mul(t, x[0], x[0])); }});
  ops.push_back({"mse_loss", {{2, 3, 2}, {2, 3, 2}}, [](Tp t, V x) { return ad::mse_loss(t, x[0], x[1]); }});
  ops.push_back({"masked_mse_loss", {{2, 6}, {2, 6}}, [](Tp t, V x) {
                   ad::Vector<double> m(12);
                   m << 1, 0, 1, 1, 0, 1, 1, 1, 0, 1, 1, 0;
                   return ad::masked_mse_loss(t, x[0], x[1], m);
                 }});
  ops.push_back({"kl_divergence", {{2, 2, 2, 2}, {2, 2, 2, 2}}, [](Tp t, V x) { return ad::kl_divergence(t, x[0], x[1]); }});
  ops.push_back({"reparameterize", {{2, 3}, {2, 3}}, [](Tp t, V x) {
                   Rng r(7);
                   return project(t, ad::reparameterize(t, x[0], x[1], random_vector(6, r)));
                 }});
  return ops;
}

/// Worst relative error of one catalogue entry over `seeds` random draws.
inline double check_op(const OpCase& op, int seeds) {
  double worst = 0;
  for (int s = 0; s < seeds; ++s) {
    Rng rng = Rng(static_cast<std::uint64_t>(s)).stream(op.name);
    std::vector<T64> inputs;
    for (const auto& shape : op.input_shapes) inputs.push_back(random_tensor(shape, rng, op.lo, op.hi));
    worst = std::max(worst, gradient_error(op.fn, inputs));
  }
  return worst;
}

inline UNetConfig tiny_unet_config() {
  UNetConfig c;
  c.latent_channels = 2;
  c.cond_channels = 2;
  c.base_width = 8;
  c.depth_levels = 2;
  c.res_blocks = 1;
  c.time_embed_dim = 16;
  c.norm_groups = 4;
  return c;
}

inline VaeConfig tiny_vae_config() {
  VaeConfig c;
  c.latent_channels = 2;
  c.downsample_factor = 2;
  c.base_width = 8;
  c.norm_groups = 4;
  c.kl_weight = 1e-3;
  return c;
}

/// Random paired latents for a tiny denoiser.
template <typename Scalar>
LatentDataset<Scalar> random_latents(int count, int channels, int h, int w, std::uint64_t seed) {
  LatentDataset<Scalar> d;
  d.channels = channels;
  d.height = h;
  d.width = w;
  Rng r(seed);
  const Eigen::Index per = Eigen::Index{channels} * h * w;
  for (int i = 0; i < count; ++i) {
    for (int f = 0; f < 2; ++f) {
      d.image[f].push_back(random_vector(per, r).template cast<Scalar>());
      d.depth[f].push_back(random_vector(per, r).template cast<Scalar>());
    }
  }
  return d;
}

}  // namespace depthdiff::testing
