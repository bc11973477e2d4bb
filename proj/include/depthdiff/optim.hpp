#pragma once

#include <cmath>
#include <cstdint>
#include <span>
#include <string>

#include "depthdiff/autodiff.hpp"

namespace depthdiff {

template <typename Scalar>
struct Parameter {
  std::string name;
  ad::Tensor<Scalar> tensor;
  ad::Vector<Scalar> adam_m;
  ad::Vector<Scalar> adam_v;
  std::int64_t step_count = 0;
};

struct AdamConfig {
  double lr = 5e-5;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam. Gradients are left in place; the caller zeroes them.
template <typename Scalar>
void adam_step(std::span<Parameter<Scalar>> params, const AdamConfig& cfg) {
  for (auto& p : params) {
    if (!p.tensor.has_grad()) throw UsageError("adam_step: parameter '" + p.name + "' has no gradient");
  }
  for (auto& p : params) {
    const auto n = p.tensor.size();
    if (p.adam_m.size() != n) p.adam_m = ad::Vector<Scalar>::Zero(n);
    if (p.adam_v.size() != n) p.adam_v = ad::Vector<Scalar>::Zero(n);
    ++p.step_count;
    const auto& g = p.tensor.grad();
    p.adam_m = Scalar(cfg.beta1) * p.adam_m + Scalar(1 - cfg.beta1) * g;
    p.adam_v = Scalar(cfg.beta2) * p.adam_v + Scalar(1 - cfg.beta2) * g.cwiseProduct(g);
    const double t = static_cast<double>(p.step_count);
    const Scalar c1 = Scalar(1.0 / (1.0 - std::pow(cfg.beta1, t)));
    const Scalar c2 = Scalar(1.0 / (1.0 - std::pow(cfg.beta2, t)));
    const Scalar lr = Scalar(cfg.lr);
    const Scalar eps = Scalar(cfg.eps);
    auto& w = p.tensor.value();
    for (Eigen::Index i = 0; i < n; ++i) {
      w(i) -= lr * (p.adam_m(i) * c1) / (std::sqrt(p.adam_v(i) * c2) + eps);
    }
  }
}

}  // namespace depthdiff
