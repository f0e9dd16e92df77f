// Copyright 2026 The HistoAge Authors.
// SPDX-License-Identifier: Apache-2.0

#include "histoage/optim.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace histoage::ad {

template <typename T>
Sgd<T>::Sgd(SgdConfig config) : config_(config) {
  if (!(config.momentum >= 0.0 && config.momentum < 1.0))
    throw ContractError("sgd: momentum must lie in [0, 1)");
  if (!(config.weight_decay >= 0.0)) throw ContractError("sgd: weight_decay must be >= 0");
}

template <typename T>
void Sgd<T>::step(ParameterStore<T>& store, const Gradients<T>& grads, double lr, StepContext ctx) {
  if (!(lr > 0.0)) throw ContractError("sgd: learning rate must be > 0");
  auto& params = store.parameters();
  if (grads.size() != params.size()) throw ContractError("sgd: gradient count mismatch");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].shape() != params[i].value.shape())
      throw ShapeError("sgd: gradient " + shape_str(grads[i].shape()) + " vs parameter " +
                       params[i].name + " " + shape_str(params[i].value.shape()));
    if (!grads[i].all_finite())
      throw NumericError("sgd: non-finite gradient for " + params[i].name + " at epoch " +
                         std::to_string(ctx.epoch) + ", batch " + std::to_string(ctx.batch));
  }
  if (velocity_.size() != params.size()) {
    velocity_.clear();
    for (const auto& p : params) velocity_.emplace_back(p.value.shape(), T{0});
  }
  const T m = static_cast<T>(config_.momentum);
  const T lr_t = static_cast<T>(lr);
  for (std::size_t i = 0; i < params.size(); ++i) {
    const T wd = params[i].decay ? static_cast<T>(config_.weight_decay) : T{0};
    auto p = params[i].value.data();
    auto v = velocity_[i].data();
    const auto g = grads[i].data();
    for (std::size_t j = 0; j < p.size(); ++j) {
      v[j] = m * v[j] + g[j] + wd * p[j];
      p[j] -= lr_t * v[j];
    }
  }
}

double cosine_learning_rate(double base_lr, std::size_t epoch, std::size_t total_epochs) {
  if (total_epochs == 0) return base_lr;
  const double progress = static_cast<double>(epoch) / static_cast<double>(total_epochs);
  return base_lr * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

template class Sgd<float>;
template class Sgd<double>;

}  // namespace histoage::ad
