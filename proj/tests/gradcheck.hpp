// Copyright 2026 The HistoAge Authors.
// SPDX-License-Identifier: Apache-2.0

// Central finite-difference oracle shared by the unit and acceptance tests.

#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "histoage/autodiff.hpp"
#include "histoage/cdl.hpp"
#include "histoage/rng.hpp"

namespace histoage::testing {

using TensorD = BasicTensor<double>;
using LossFn = std::function<ad::Var<double>(ad::Tape<double>&, const std::vector<ad::Var<double>>&)>;

/// |a - n| / max(|a|, |n|, floor). The floor keeps entries whose true
/// derivative is ~0 from dividing round-off by round-off.
inline double relative_error(double analytic, double numeric, double floor = 1e-3) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

inline TensorD random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  TensorD t(std::move(shape));
  for (auto& v : t.data()) v = rng.uniform(lo, hi);
  return t;
}

/// Same as random_tensor but every entry has |v| >= gap, keeping relu and
/// max-pool inputs away from their kinks.
inline TensorD kink_free_tensor(Shape shape, Rng& rng, double gap = 0.05) {
  TensorD t(std::move(shape));
  for (auto& v : t.data()) {
    const double m = rng.uniform(gap, 1.0);
    v = rng.bernoulli(0.5) ? m : -m;
  }
  return t;
}

/// Largest elementwise relative error between backward() and central
/// differences over every entry of every input.
inline double max_gradient_error(const LossFn& fn, std::vector<TensorD> inputs, double h = 1e-4) {
  ad::Tape<double> tape;
  std::vector<ad::Var<double>> vars;
  for (const auto& x : inputs) vars.push_back(tape.variable(x));
  tape.backward(fn(tape, vars));
  double worst = 0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    const auto analytic = tape.grad(vars[k]);
    for (std::size_t j = 0; j < inputs[k].size(); ++j) {
      auto eval = [&](double delta) {
        auto shifted = inputs;
        shifted[k][j] += delta;
        ad::Tape<double> t;
        std::vector<ad::Var<double>> v;
        for (const auto& x : shifted) v.push_back(t.variable(x));
        return fn(t, v).value().item();
      };
      const double numeric = (eval(h) - eval(-h)) / (2 * h);
      worst = std::max(worst, relative_error(analytic[j], numeric));
    }
  }
  return worst;
}

/// Scalarises any op output with fixed random weights so that every output
/// element contributes a distinct upstream gradient.
inline ad::Var<double> weighted_sum(ad::Var<double> y, std::uint64_t seed) {
  Rng rng(seed);
  auto w = random_tensor(y.shape(), rng);
  return ad::sum(ad::mul(y, y.tape->constant(w)));
}

/// Tiny encoder/predictor (179 trainable scalars) on 8x8 inputs.
inline CdlNetwork<double> tiny_network(std::uint64_t seed) {
  EncoderConfig e;
  e.widths = {2, 2, 2};
  e.depths = {1, 1, 1};
  e.input_side = 8;
  e.embed_dim = 4;
  CdlNetwork<double> net(e, PredictorConfig{}, seed);
  // Positive biases keep the narrow ReLU layers active and away from kinks.
  Rng rng(seed ^ 0x5bd1e995u);
  for (auto& p : net.store().parameters())
    if (p.name.size() > 2 && p.name.ends_with(".b"))
      for (auto& v : p.value.data()) v = rng.uniform(0.1, 0.3);
  return net;
}

inline ImageF random_image(int side, Rng& rng) {
  ImageF img(side, side);
  for (auto& v : img.data) v = static_cast<float>(rng.uniform());
  return img;
}

/// Pairs of independent random 8x8 views.
inline std::vector<ViewPair> random_pairs(std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<ViewPair> out(n);
  for (auto& p : out) {
    p.v1 = random_image(8, rng);
    p.v2 = random_image(8, rng);
  }
  return out;
}

/// First tiny network from `seed` upwards whose encoder output is non-zero
/// on every view of the batch (the final ReLU can silence a 4-wide head).
inline CdlNetwork<double> live_tiny_network(std::span<const ViewPair> batch, std::uint64_t seed) {
  for (std::uint64_t s = seed; s < seed + 100; ++s) {
    auto net = tiny_network(s);
    try {
      cdl_loss_and_gradients(net, batch);
      return tiny_network(s);
    } catch (const NumericError&) {
    }
  }
  throw NumericError("no live tiny network in 100 seeds");
}

/// The siamese loss with the v2 branch replaced by fixed targets: the
/// function whose gradient the stop-gradient loss reports.
inline double frozen_target_loss(CdlNetwork<double>& net, std::span<const ViewPair> batch,
                                 const std::vector<std::vector<double>>& z2) {
  ad::Tape<double> tape(&net.store());
  std::vector<ad::Var<double>> z1;
  for (const auto& pair : batch) z1.push_back(net.encode(tape, tape.constant(image_tensor<double>(pair.v1))));
  auto p = net.predict(tape, ad::stack(z1), ad::BatchNormMode::kTrain);
  std::vector<double> flat;
  for (const auto& row : z2) flat.insert(flat.end(), row.begin(), row.end());
  auto target = tape.constant(TensorD({z2.size(), z2.front().size()}, flat));
  return negative_cosine(p, target).value().item();
}

/// Worst relative error of the full siamese loss gradient against central
/// differences over every trainable scalar, the v2 targets held fixed.
inline double cdl_gradient_error(CdlNetwork<double>& net, std::span<const ViewPair> batch, double h = 1e-4) {
  const auto analytic = cdl_loss_and_gradients(net, batch);
  double worst = 0;
  auto& params = net.store().parameters();
  for (std::size_t k = 0; k < params.size(); ++k) {
    for (std::size_t j = 0; j < params[k].value.size(); ++j) {
      const double orig = params[k].value[j];
      params[k].value[j] = orig + h;
      const double up = frozen_target_loss(net, batch, analytic.z2);
      params[k].value[j] = orig - h;
      const double down = frozen_target_loss(net, batch, analytic.z2);
      params[k].value[j] = orig;
      worst = std::max(worst, relative_error(analytic.grads[k][j], (up - down) / (2 * h)));
    }
  }
  return worst;
}

}  // namespace histoage::testing
