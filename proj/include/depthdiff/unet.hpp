#pragma once

// Conditional denoiser over concatenated [depth latent, image latent] input.
// There is no text or cross-attention pathway: the only conditioning inputs are
// the concatenated latent and the timestep.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "depthdiff/nn.hpp"

namespace depthdiff {

enum class Objective { epsilon, v };

inline std::string to_string(Objective o) { return o == Objective::v ? "v" : "epsilon"; }

inline Objective objective_from_string(const std::string& s) {
  if (s == "v") return Objective::v;
  if (s == "epsilon") return Objective::epsilon;
  throw ConfigError("unknown objective '" + s + "' (expected v or epsilon)");
}

struct UNetConfig {
  int latent_channels = 4;
  int cond_channels = 4;  // 0 builds an unconditional denoiser
  int base_width = 64;
  int depth_levels = 3;
  int res_blocks = 2;
  int time_embed_dim = 128;
  int norm_groups = 8;
  double max_period = 10000.0;
  Objective objective = Objective::v;

  void validate() const {
    if (latent_channels <= 0 || cond_channels < 0 || base_width <= 0 || depth_levels < 1 || res_blocks < 1) {
      throw ConfigError("unet: invalid channel or level counts");
    }
    if (time_embed_dim <= 0 || time_embed_dim % 2 != 0) {
      throw ConfigError("unet: time_embed_dim must be positive and even, got " + std::to_string(time_embed_dim));
    }
    if (norm_groups <= 0 || base_width % norm_groups != 0) {
      throw ConfigError("unet: base_width " + std::to_string(base_width) + " not divisible by norm_groups " +
                        std::to_string(norm_groups));
    }
  }

  int in_channels() const { return latent_channels + cond_channels; }
  int channels(int level) const { return base_width * std::min(1 << level, 4); }
};

/// Interleaved sin/cos features: entry 2i is sin(t * f_i), entry 2i+1 is
/// cos(t * f_i), with f_i = max_period^(-i / (dim/2)).
inline Eigen::VectorXd sinusoidal_embed(int t, int dim, double max_period = 10000.0) {
  if (dim <= 0 || dim % 2 != 0) throw ConfigError("sinusoidal_embed: dim must be positive and even, got " + std::to_string(dim));
  if (t < 0) throw UsageError("sinusoidal_embed: timestep must be nonnegative");
  const int half = dim / 2;
  Eigen::VectorXd e(dim);
  for (int i = 0; i < half; ++i) {
    const double freq = std::exp(-std::log(max_period) * static_cast<double>(i) / half);
    e(2 * i) = std::sin(t * freq);
    e(2 * i + 1) = std::cos(t * freq);
  }
  return e;
}

template <typename Scalar>
class UNet {
 public:
  UNet(const UNetConfig& cfg, std::uint64_t seed) : cfg_(cfg), store_(seed) {
    cfg_.validate();
    const int td = cfg_.time_embed_dim;
    const int g = cfg_.norm_groups;
    const int levels = cfg_.depth_levels;
    time1_ = Linear<Scalar>(store_, "unet.time.fc1", td, td);
    time2_ = Linear<Scalar>(store_, "unet.time.fc2", td, td);
    in_conv_ = Conv2d<Scalar>(store_, "unet.in_conv", cfg_.in_channels(), cfg_.channels(0), 3);

    int ch = cfg_.channels(0);
    for (int l = 0; l < levels; ++l) {
      for (int b = 0; b < cfg_.res_blocks; ++b) {
        down_blocks_.emplace_back(store_, name("unet.down", l, b), ch, cfg_.channels(l), g, td);
        ch = cfg_.channels(l);
      }
      if (l + 1 < levels) downsample_.emplace_back(store_, "unet.down.l" + std::to_string(l) + ".downsample", ch, ch, 3, 2);
    }
    mid_ = ResBlock<Scalar>(store_, "unet.mid", ch, ch, g, td);
    for (int l = levels - 1; l >= 0; --l) {
      for (int b = 0; b < cfg_.res_blocks; ++b) {
        const int cin = b == 0 ? ch + cfg_.channels(l) : ch;
        up_blocks_.emplace_back(store_, name("unet.up", l, b), cin, cfg_.channels(l), g, td);
        ch = cfg_.channels(l);
      }
      if (l > 0) {
        upsample_.emplace_back(store_, "unet.up.l" + std::to_string(l) + ".upsample", ch, cfg_.channels(l - 1), 3);
        ch = cfg_.channels(l - 1);
      }
    }
    out_norm_ = GroupNorm<Scalar>(store_, "unet.out_norm", ch, g);
    out_conv_ = Conv2d<Scalar>(store_, "unet.out_conv", ch, cfg_.latent_channels, 3);
  }

  UNet(const UNet&) = delete;
  UNet& operator=(const UNet&) = delete;
  UNet(UNet&&) noexcept = default;
  UNet& operator=(UNet&&) noexcept = default;

  const UNetConfig& config() const { return cfg_; }
  ParameterStore<Scalar>& params() { return store_; }
  const ParameterStore<Scalar>& params() const { return store_; }

  /// z: [N, latent + cond, h, w]; t: one timestep per sample. Returns [N, latent, h, w].
  ad::Tensor<Scalar> forward(ad::Tape<Scalar>& tape, const ad::Tensor<Scalar>& z, std::span<const int> t) const {
    if (z.rank() != 4 || z.dim(1) != cfg_.in_channels()) {
      throw DimensionError("unet: expected input channels (axis 1) = " + std::to_string(cfg_.in_channels()) + ", got " +
                           ad::shape_str(z.shape()));
    }
    const int n = z.dim(0);
    if (static_cast<int>(t.size()) != n) throw DimensionError("unet: need one timestep per sample");
    const int stride = 1 << (cfg_.depth_levels - 1);
    if (z.dim(2) % stride != 0 || z.dim(3) % stride != 0) {
      throw DimensionError("unet: latent extents must be divisible by " + std::to_string(stride));
    }

    const int td = cfg_.time_embed_dim;
    auto temb = ad::Tensor<Scalar>::zeros({n, td});
    for (int s = 0; s < n; ++s) {
      temb.value().segment(Eigen::Index{s} * td, td) =
          sinusoidal_embed(t[static_cast<std::size_t>(s)], td, cfg_.max_period).template cast<Scalar>();
    }
    temb = ad::silu(tape, time2_(tape, ad::silu(tape, time1_(tape, temb))));

    auto h = in_conv_(tape, z);
    std::vector<ad::Tensor<Scalar>> skips;
    std::size_t bi = 0;
    for (int l = 0; l < cfg_.depth_levels; ++l) {
      for (int b = 0; b < cfg_.res_blocks; ++b) h = down_blocks_[bi++](tape, h, temb);
      skips.push_back(h);
      if (l + 1 < cfg_.depth_levels) h = downsample_[static_cast<std::size_t>(l)](tape, h);
    }
    h = mid_(tape, h, temb);
    bi = 0;
    std::size_t ui = 0;
    for (int l = cfg_.depth_levels - 1; l >= 0; --l) {
      h = ad::concat_channels(tape, h, skips[static_cast<std::size_t>(l)]);
      for (int b = 0; b < cfg_.res_blocks; ++b) h = up_blocks_[bi++](tape, h, temb);
      if (l > 0) h = upsample_[ui++](tape, ad::upsample_nearest2x(tape, h));
    }
    return out_conv_(tape, ad::silu(tape, out_norm_(tape, h)));
  }

 private:
  static std::string name(const std::string& prefix, int level, int block) {
    return prefix + ".l" + std::to_string(level) + ".b" + std::to_string(block);
  }

  UNetConfig cfg_;
  ParameterStore<Scalar> store_;
  Linear<Scalar> time1_, time2_;
  Conv2d<Scalar> in_conv_, out_conv_;
  std::vector<ResBlock<Scalar>> down_blocks_, up_blocks_;
  std::vector<Conv2d<Scalar>> downsample_, upsample_;
  ResBlock<Scalar> mid_;
  GroupNorm<Scalar> out_norm_;
};

/// Widens an input-layer weight [O, C, kh, kw] to [O, 2C, kh, kw] by
/// concatenating two halved copies along the input-channel axis, so that
/// feeding the same latent twice reproduces the original response.
template <typename Scalar>
ad::Tensor<Scalar> adapt_input_layer(const ad::Tensor<Scalar>& weight) {
  if (weight.rank() != 4) throw DimensionError("adapt_input_layer: weight must have rank 4, got " + ad::shape_str(weight.shape()));
  const int o = weight.dim(0), c = weight.dim(1);
  const Eigen::Index taps = Eigen::Index{c} * weight.dim(2) * weight.dim(3);
  ad::Vector<Scalar> v(2 * taps * o);
  for (int k = 0; k < o; ++k) {
    const auto src = weight.value().segment(Eigen::Index{k} * taps, taps);
    v.segment(Eigen::Index{k} * 2 * taps, taps) = src / Scalar(2);
    v.segment(Eigen::Index{k} * 2 * taps + taps, taps) = src / Scalar(2);
  }
  return ad::Tensor<Scalar>({o, 2 * c, weight.dim(2), weight.dim(3)}, std::move(v));
}

/// Initializes a conditional U-Net from an unconditional one with the same
/// architecture: every parameter is copied and the input layer is widened with
/// adapt_input_layer. Requires cond_channels == latent_channels.
template <typename Scalar>
void init_from_unconditional(UNet<Scalar>& conditional, const UNet<Scalar>& unconditional) {
  const auto& cc = conditional.config();
  const auto& uc = unconditional.config();
  if (uc.cond_channels != 0 || cc.cond_channels != cc.latent_channels || uc.latent_channels != cc.latent_channels ||
      uc.base_width != cc.base_width || uc.depth_levels != cc.depth_levels || uc.res_blocks != cc.res_blocks ||
      uc.time_embed_dim != cc.time_embed_dim || uc.norm_groups != cc.norm_groups) {
    throw ConfigError("init_from_unconditional: architectures are not compatible");
  }
  for (auto& p : conditional.params().params()) {
    const auto* q = unconditional.params().find(p.name);
    if (q == nullptr) throw ConfigError("init_from_unconditional: missing parameter '" + p.name + "'");
    if (p.name == "unet.in_conv.weight") {
      p.tensor.value() = adapt_input_layer(q->tensor).value();
    } else {
      p.tensor.value() = q->tensor.value();
    }
  }
}

}  // namespace depthdiff
