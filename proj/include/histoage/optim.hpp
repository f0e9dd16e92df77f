// Copyright 2026 The HistoAge Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <vector>

#include "histoage/autodiff.hpp"

namespace histoage::ad {

struct SgdConfig {
  double learning_rate = 0.05;
  double momentum = 0.9;
  double weight_decay = 1e-4;
};

/// Where a step happens, for diagnostics on refused steps.
struct StepContext {
  std::size_t epoch = 0;
  std::size_t batch = 0;
};

/// SGD with heavy-ball momentum:
///   v <- momentum * v + grad + weight_decay * p   (decay only on p.decay)
///   p <- p - lr * v
template <typename T>
class Sgd {
 public:
  explicit Sgd(SgdConfig config);

  /// Applies one update at learning rate `lr`. Non-finite gradients refuse the
  /// whole step (no parameter changes) with a NumericError naming the context.
  void step(ParameterStore<T>& store, const Gradients<T>& grads, double lr, StepContext ctx = {});

  const SgdConfig& config() const { return config_; }

 private:
  SgdConfig config_;
  std::vector<BasicTensor<T>> velocity_;
};

/// Cosine decay from base_lr at epoch 0 towards 0 at epoch == total_epochs.
double cosine_learning_rate(double base_lr, std::size_t epoch, std::size_t total_epochs);

}  // namespace histoage::ad
