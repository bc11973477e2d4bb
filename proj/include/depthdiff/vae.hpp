#pragma once

// Convolutional VAE. The encoder halves the resolution log2(downsample_factor)
// times and emits a diagonal Gaussian over a latent_channels-deep grid; the
// decoder mirrors it and ends in tanh so reconstructions lie in (-1, 1).

#include <bit>
#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "depthdiff/depth_codec.hpp"
#include "depthdiff/image.hpp"
#include "depthdiff/nn.hpp"

namespace depthdiff {

struct VaeConfig {
  int in_channels = 3;
  int latent_channels = 4;
  int downsample_factor = 4;
  int base_width = 32;
  int res_blocks = 1;
  int norm_groups = 8;
  double kl_weight = 1e-6;
  /// Feed sampled rather than mean latents to the diffusion model.
  bool sample_latent = false;

  void validate() const {
    if (in_channels <= 0 || latent_channels <= 0 || base_width <= 0 || res_blocks < 0) {
      throw ConfigError("vae: channel counts must be positive");
    }
    if (downsample_factor < 1 || (downsample_factor & (downsample_factor - 1)) != 0) {
      throw ConfigError("vae: downsample_factor must be a power of two, got " + std::to_string(downsample_factor));
    }
    if (norm_groups <= 0 || base_width % norm_groups != 0) {
      throw ConfigError("vae: base_width " + std::to_string(base_width) + " not divisible by norm_groups " +
                        std::to_string(norm_groups));
    }
    if (!(kl_weight >= 0)) throw ConfigError("vae: kl_weight must be nonnegative");
  }

  int levels() const { return std::countr_zero(static_cast<unsigned>(downsample_factor)) + 1; }
  int channels(int level) const { return base_width * (level == 0 ? 1 : 2); }

  void check_extent(int h, int w) const {
    if (h % downsample_factor != 0 || w % downsample_factor != 0) {
      throw DimensionError("vae: image " + std::to_string(h) + "x" + std::to_string(w) +
                           " not divisible by downsample factor " + std::to_string(downsample_factor));
    }
  }
};

template <typename Scalar>
struct LatentDistribution {
  ad::Tensor<Scalar> mean;
  ad::Tensor<Scalar> logvar;
};

template <typename Scalar>
class Vae {
 public:
  Vae(const VaeConfig& cfg, std::uint64_t seed) : cfg_(cfg), store_(seed) {
    cfg_.validate();
    const int levels = cfg_.levels();
    const int g = cfg_.norm_groups;
    const int top = cfg_.channels(levels - 1);

    enc_in_ = Conv2d<Scalar>(store_, "vae.enc.in", cfg_.in_channels, cfg_.channels(0), 3);
    int ch = cfg_.channels(0);
    for (int l = 0; l < levels; ++l) {
      for (int b = 0; b < cfg_.res_blocks; ++b) {
        enc_blocks_.emplace_back(store_, block_name("vae.enc", l, b), ch, cfg_.channels(l), g);
        ch = cfg_.channels(l);
      }
      if (l + 1 < levels) enc_down_.emplace_back(store_, "vae.enc.down" + std::to_string(l), ch, ch, 3, 2);
    }
    enc_mid_ = ResBlock<Scalar>(store_, "vae.enc.mid", top, top, g);
    enc_norm_ = GroupNorm<Scalar>(store_, "vae.enc.norm_out", top, g);
    enc_out_ = Conv2d<Scalar>(store_, "vae.enc.out", top, 2 * cfg_.latent_channels, 3);

    dec_in_ = Conv2d<Scalar>(store_, "vae.dec.in", cfg_.latent_channels, top, 3);
    dec_mid_ = ResBlock<Scalar>(store_, "vae.dec.mid", top, top, g);
    ch = top;
    for (int l = levels - 1; l >= 0; --l) {
      for (int b = 0; b < cfg_.res_blocks; ++b) {
        dec_blocks_.emplace_back(store_, block_name("vae.dec", l, b), ch, cfg_.channels(l), g);
        ch = cfg_.channels(l);
      }
      if (l > 0) {
        dec_up_.emplace_back(store_, "vae.dec.up" + std::to_string(l), ch, cfg_.channels(l - 1), 3);
        ch = cfg_.channels(l - 1);
      }
    }
    dec_norm_ = GroupNorm<Scalar>(store_, "vae.dec.norm_out", ch, g);
    dec_out_ = Conv2d<Scalar>(store_, "vae.dec.out", ch, cfg_.in_channels, 3);
  }

  Vae(const Vae&) = delete;
  Vae& operator=(const Vae&) = delete;
  Vae(Vae&&) noexcept = default;
  Vae& operator=(Vae&&) noexcept = default;

  const VaeConfig& config() const { return cfg_; }
  ParameterStore<Scalar>& params() { return store_; }
  const ParameterStore<Scalar>& params() const { return store_; }

  /// x: [N, in_channels, H, W] in [-1, 1]; returns mean/logvar of shape [N, C, H/f, W/f].
  LatentDistribution<Scalar> encode(ad::Tape<Scalar>& tape, const ad::Tensor<Scalar>& x) const {
    if (x.rank() != 4 || x.dim(1) != cfg_.in_channels) {
      throw DimensionError("vae.encode: expected [N," + std::to_string(cfg_.in_channels) + ",H,W], got " +
                           ad::shape_str(x.shape()));
    }
    cfg_.check_extent(x.dim(2), x.dim(3));
    auto h = enc_in_(tape, x);
    std::size_t bi = 0;
    for (int l = 0; l < cfg_.levels(); ++l) {
      for (int b = 0; b < cfg_.res_blocks; ++b) h = enc_blocks_[bi++](tape, h);
      if (l + 1 < cfg_.levels()) h = enc_down_[static_cast<std::size_t>(l)](tape, h);
    }
    h = enc_mid_(tape, h);
    h = enc_out_(tape, ad::silu(tape, enc_norm_(tape, h)));
    const int c = cfg_.latent_channels;
    return {ad::slice_channels(tape, h, 0, c), ad::slice_channels(tape, h, c, 2 * c)};
  }

  /// z: [N, C, h, w] -> [N, in_channels, h*f, w*f] in (-1, 1).
  ad::Tensor<Scalar> decode(ad::Tape<Scalar>& tape, const ad::Tensor<Scalar>& z) const {
    if (z.rank() != 4 || z.dim(1) != cfg_.latent_channels) {
      throw DimensionError("vae.decode: expected [N," + std::to_string(cfg_.latent_channels) + ",h,w], got " +
                           ad::shape_str(z.shape()));
    }
    auto h = dec_mid_(tape, dec_in_(tape, z));
    std::size_t bi = 0;
    for (int l = cfg_.levels() - 1; l >= 0; --l) {
      for (int b = 0; b < cfg_.res_blocks; ++b) h = dec_blocks_[bi++](tape, h);
      if (l > 0) h = dec_up_[static_cast<std::size_t>(cfg_.levels() - 1 - l)](tape, ad::upsample_nearest2x(tape, h));
    }
    return ad::tanh(tape, dec_out_(tape, ad::silu(tape, dec_norm_(tape, h))));
  }

 private:
  static std::string block_name(const std::string& prefix, int level, int block) {
    return prefix + ".l" + std::to_string(level) + ".b" + std::to_string(block);
  }

  VaeConfig cfg_;
  ParameterStore<Scalar> store_;
  Conv2d<Scalar> enc_in_, enc_out_, dec_in_, dec_out_;
  std::vector<ResBlock<Scalar>> enc_blocks_, dec_blocks_;
  std::vector<Conv2d<Scalar>> enc_down_, dec_up_;
  ResBlock<Scalar> enc_mid_, dec_mid_;
  GroupNorm<Scalar> enc_norm_, dec_norm_;
};

template <typename Scalar>
ad::Tensor<Scalar> reparameterize(ad::Tape<Scalar>& tape, const LatentDistribution<Scalar>& dist,
                                  const ad::Vector<Scalar>& noise) {
  return ad::reparameterize(tape, dist.mean, dist.logvar, noise);
}

template <typename Scalar>
ad::Tensor<Scalar> kl_divergence(ad::Tape<Scalar>& tape, const LatentDistribution<Scalar>& dist) {
  return ad::kl_divergence(tape, dist.mean, dist.logvar);
}

/// Reconstruction MSE (masked when a mask is given) plus kl_weight * KL.
template <typename Scalar>
ad::Tensor<Scalar> vae_loss(ad::Tape<Scalar>& tape, const ad::Tensor<Scalar>& x, const ad::Tensor<Scalar>& recon,
                            const LatentDistribution<Scalar>& dist, double kl_weight,
                            const ad::Vector<Scalar>* mask = nullptr) {
  auto rec = mask ? ad::masked_mse_loss(tape, recon, x, *mask) : ad::mse_loss(tape, recon, x);
  if (kl_weight == 0) return rec;
  return ad::add(tape, rec, ad::scale(tape, kl_divergence(tape, dist), Scalar(kl_weight)));
}

// Conversions between image containers and NCHW tensors.

/// RGB in [0, 1] -> [N, 3, H, W] in [-1, 1].
template <typename Scalar>
ad::Tensor<Scalar> rgb_batch(std::span<const RgbImage> images) {
  if (images.empty()) throw DimensionError("rgb_batch: empty batch");
  const int h = images[0].height(), w = images[0].width();
  const Eigen::Index hw = Eigen::Index{h} * w;
  auto t = ad::Tensor<Scalar>::zeros({static_cast<int>(images.size()), 3, h, w});
  for (std::size_t n = 0; n < images.size(); ++n) {
    if (images[n].height() != h || images[n].width() != w) throw DimensionError("rgb_batch: mixed image sizes");
    for (int c = 0; c < 3; ++c) {
      const Eigen::Index off = (static_cast<Eigen::Index>(n) * 3 + c) * hw;
      for (Eigen::Index i = 0; i < hw; ++i) t.value()(off + i) = Scalar(2.0 * images[n].channels[c].data()[i] - 1.0);
    }
  }
  return t;
}

/// Normalized depth planes -> [N, 3, H, W] with the plane replicated on every channel.
template <typename Scalar>
ad::Tensor<Scalar> depth_batch(std::span<const Plane> planes) {
  if (planes.empty()) throw DimensionError("depth_batch: empty batch");
  const int h = static_cast<int>(planes[0].rows()), w = static_cast<int>(planes[0].cols());
  const Eigen::Index hw = Eigen::Index{h} * w;
  auto t = ad::Tensor<Scalar>::zeros({static_cast<int>(planes.size()), 3, h, w});
  for (std::size_t n = 0; n < planes.size(); ++n) {
    if (planes[n].rows() != h || planes[n].cols() != w) throw DimensionError("depth_batch: mixed plane sizes");
    const auto rep = replicate_channels(planes[n]);
    for (int c = 0; c < 3; ++c) {
      const Eigen::Index off = (static_cast<Eigen::Index>(n) * 3 + c) * hw;
      for (Eigen::Index i = 0; i < hw; ++i) t.value()(off + i) = Scalar(rep[static_cast<std::size_t>(c)].data()[i]);
    }
  }
  return t;
}

/// Channel planes of sample n of an NCHW tensor.
template <typename Scalar>
std::vector<Plane> tensor_planes(const ad::Tensor<Scalar>& t, int n) {
  const int c = t.dim(1), h = t.dim(2), w = t.dim(3);
  const Eigen::Index hw = Eigen::Index{h} * w;
  std::vector<Plane> out;
  for (int k = 0; k < c; ++k) {
    Plane p(h, w);
    const Eigen::Index off = (Eigen::Index{n} * c + k) * hw;
    for (Eigen::Index i = 0; i < hw; ++i) p.data()[i] = static_cast<double>(t.value()(off + i));
    out.push_back(std::move(p));
  }
  return out;
}

}  // namespace depthdiff
