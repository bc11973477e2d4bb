#pragma once

// Parameter storage and the layers shared by the VAE and the U-Net.

#include <cmath>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "depthdiff/hash.hpp"
#include "depthdiff/ops.hpp"
#include "depthdiff/optim.hpp"
#include "depthdiff/rng.hpp"

namespace depthdiff {

enum class Init { kaiming_uniform, zeros, ones };

/// Named parameters of one model. Initialization of each parameter draws from
/// an RNG stream keyed by (seed, name), so adding a layer never perturbs the
/// initial values of the others.
template <typename Scalar>
class ParameterStore {
 public:
  explicit ParameterStore(std::uint64_t seed = 0) : seed_(seed) {}

  ad::Tensor<Scalar> add(const std::string& name, ad::Shape shape, Init init, int fan_in = 1) {
    if (index_.count(name) != 0) throw ConfigError("duplicate parameter name '" + name + "'");
    const auto n = ad::numel(shape);
    ad::Vector<Scalar> v(n);
    switch (init) {
      case Init::zeros: v.setZero(); break;
      case Init::ones: v.setOnes(); break;
      case Init::kaiming_uniform: {
        // Kaiming-uniform with negative slope sqrt(5): bound = 1 / sqrt(fan_in).
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        Rng rng = Rng(seed_).stream(name);
        for (Eigen::Index i = 0; i < n; ++i) v(i) = Scalar(rng.uniform(-bound, bound));
        break;
      }
    }
    index_[name] = params_.size();
    params_.push_back(Parameter<Scalar>{name, ad::Tensor<Scalar>(std::move(shape), std::move(v), true), {}, {}, 0});
    return params_.back().tensor;
  }

  std::span<Parameter<Scalar>> params() { return params_; }
  std::span<const Parameter<Scalar>> params() const { return params_; }

  Parameter<Scalar>* find(const std::string& name) {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }
  const Parameter<Scalar>* find(const std::string& name) const {
    auto it = index_.find(name);
    return it == index_.end() ? nullptr : &params_[it->second];
  }
  Parameter<Scalar>& get(const std::string& name) {
    auto* p = find(name);
    if (p == nullptr) throw ConfigError("no parameter named '" + name + "'");
    return *p;
  }

  Eigen::Index scalar_count() const {
    Eigen::Index n = 0;
    for (const auto& p : params_) n += p.tensor.size();
    return n;
  }

  void zero_grad() {
    for (auto& p : params_) p.tensor.zero_grad();
  }

  void set_requires_grad(bool on) {
    for (auto& p : params_) p.tensor.set_requires_grad(on);
  }

  /// Copies values by name. Both stores must hold exactly the same names and shapes.
  template <typename Other>
  void copy_values_from(const ParameterStore<Other>& other) {
    if (other.params().size() != params_.size()) throw ConfigError("parameter sets differ in size");
    for (auto& p : params_) {
      const auto* q = other.find(p.name);
      if (q == nullptr) throw ConfigError("source has no parameter '" + p.name + "'");
      if (q->tensor.shape() != p.tensor.shape()) {
        throw ConfigError("parameter '" + p.name + "' shape " + ad::shape_str(q->tensor.shape()) + " vs " +
                          ad::shape_str(p.tensor.shape()));
      }
      p.tensor.value() = q->tensor.value().template cast<Scalar>();
    }
  }

  /// Digest of names, shapes, and values (as stored bytes).
  std::uint64_t value_hash() const {
    std::uint64_t h = kFnvOffset;
    for (const auto& p : params_) {
      h = fnv1a(p.name, h);
      h = fnv1a(std::as_bytes(std::span(p.tensor.shape())), h);
      h = fnv1a(std::as_bytes(std::span(p.tensor.data(), static_cast<std::size_t>(p.tensor.size()))), h);
    }
    return h;
  }

 private:
  std::uint64_t seed_;
  std::vector<Parameter<Scalar>> params_;
  std::map<std::string, std::size_t> index_;
};

template <typename Scalar>
struct Conv2d {
  ad::Tensor<Scalar> weight, bias;
  int stride = 1, padding = 0;

  Conv2d() = default;
  Conv2d(ParameterStore<Scalar>& store, const std::string& name, int cin, int cout, int kernel, int stride_ = 1)
      : stride(stride_), padding(kernel / 2) {
    weight = store.add(name + ".weight", {cout, cin, kernel, kernel}, Init::kaiming_uniform, cin * kernel * kernel);
    bias = store.add(name + ".bias", {cout}, Init::zeros);
  }

  ad::Tensor<Scalar> operator()(ad::Tape<Scalar>& tape, const ad::Tensor<Scalar>& x) const {
    return ad::conv2d(tape, x, weight, bias, stride, padding);
  }
};

template <typename Scalar>
struct Linear {
  ad::Tensor<Scalar> weight, bias;

  Linear() = default;
  Linear(ParameterStore<Scalar>& store, const std::string& name, int din, int dout) {
    weight = store.add(name + ".weight", {dout, din}, Init::kaiming_uniform, din);
    bias = store.add(name + ".bias", {dout}, Init::zeros);
  }

  ad::Tensor<Scalar> operator()(ad::Tape<Scalar>& tape, const ad::Tensor<Scalar>& x) const {
    return ad::linear(tape, x, weight, bias);
  }
};

template <typename Scalar>
struct GroupNorm {
  ad::Tensor<Scalar> gamma, beta;
  int groups = 1;

  GroupNorm() = default;
  GroupNorm(ParameterStore<Scalar>& store, const std::string& name, int channels, int groups_) : groups(groups_) {
    if (groups <= 0 || channels % groups != 0) {
      throw ConfigError(name + ": channels " + std::to_string(channels) + " not divisible by " + std::to_string(groups) +
                        " groups");
    }
    gamma = store.add(name + ".gamma", {channels}, Init::ones);
    beta = store.add(name + ".beta", {channels}, Init::zeros);
  }

  ad::Tensor<Scalar> operator()(ad::Tape<Scalar>& tape, const ad::Tensor<Scalar>& x) const {
    return ad::group_norm(tape, x, groups, gamma, beta, Scalar(1e-5));
  }
};

/// GroupNorm -> SiLU -> conv, twice, with an optional timestep projection added
/// between the convolutions and a 1x1 skip when the channel count changes.
template <typename Scalar>
struct ResBlock {
  GroupNorm<Scalar> norm1, norm2;
  Conv2d<Scalar> conv1, conv2;
  Linear<Scalar> time_proj;
  Conv2d<Scalar> skip;
  bool has_time = false;
  bool has_skip = false;

  ResBlock() = default;
  ResBlock(ParameterStore<Scalar>& store, const std::string& name, int cin, int cout, int groups, int time_dim = 0)
      : has_time(time_dim > 0), has_skip(cin != cout) {
    norm1 = GroupNorm<Scalar>(store, name + ".norm1", cin, groups);
    conv1 = Conv2d<Scalar>(store, name + ".conv1", cin, cout, 3);
    if (has_time) time_proj = Linear<Scalar>(store, name + ".time_proj", time_dim, cout);
    norm2 = GroupNorm<Scalar>(store, name + ".norm2", cout, groups);
    conv2 = Conv2d<Scalar>(store, name + ".conv2", cout, cout, 3);
    if (has_skip) skip = Conv2d<Scalar>(store, name + ".skip", cin, cout, 1);
  }

  ad::Tensor<Scalar> operator()(ad::Tape<Scalar>& tape, const ad::Tensor<Scalar>& x,
                                const ad::Tensor<Scalar>& temb = {}) const {
    auto h = conv1(tape, ad::silu(tape, norm1(tape, x)));
    if (has_time) h = ad::add_channel_bias(tape, h, time_proj(tape, temb));
    h = conv2(tape, ad::silu(tape, norm2(tape, h)));
    return ad::add(tape, h, has_skip ? skip(tape, x) : x);
  }
};

}  // namespace depthdiff
