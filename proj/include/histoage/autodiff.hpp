// Copyright 2026 The HistoAge Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "histoage/tensor.hpp"

/// Reverse-mode automatic differentiation over BasicTensor.
///
/// A Tape records forward ops in creation order, so node ids are already a
/// topological order and backward() is a single reverse sweep. Parameters
/// live in a ParameterStore outside the tape; backward() returns one gradient
/// per registered parameter (zeros where no path reaches the loss).
///
/// Layouts: images are [C, H, W] for a single sample; fully connected and
/// batch norm take [N, F] (or [F] for one row).
namespace histoage::ad {

enum class Padding { kSame, kValid };
enum class BatchNormMode { kTrain, kEval };

template <typename T>
struct Parameter {
  std::string name;
  BasicTensor<T> value;
  bool decay = true;  // receives weight decay in Sgd
};

template <typename T>
class ParameterStore {
 public:
  std::size_t add_parameter(std::string name, BasicTensor<T> init, bool decay = true);
  /// Non-trainable state such as batch-norm running statistics.
  std::size_t add_buffer(std::string name, BasicTensor<T> init);

  std::vector<Parameter<T>>& parameters() { return params_; }
  const std::vector<Parameter<T>>& parameters() const { return params_; }
  std::vector<Parameter<T>>& buffers() { return buffers_; }
  const std::vector<Parameter<T>>& buffers() const { return buffers_; }

  std::size_t parameter_index(std::string_view name) const;
  std::size_t buffer_index(std::string_view name) const;
  /// Total number of trainable scalars.
  std::size_t scalar_count() const;

  template <typename U>
  ParameterStore<U> cast() const {
    ParameterStore<U> out;
    for (const auto& p : params_) out.add_parameter(p.name, p.value.template cast<U>(), p.decay);
    for (const auto& b : buffers_) out.add_buffer(b.name, b.value.template cast<U>());
    return out;
  }

 private:
  std::vector<Parameter<T>> params_;
  std::vector<Parameter<T>> buffers_;
};

template <typename T>
using Gradients = std::vector<BasicTensor<T>>;

template <typename T>
class Tape;

/// Handle to a node on a Tape.
template <typename T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const BasicTensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }
};

template <typename T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t)>;

  explicit Tape(const ParameterStore<T>* store = nullptr) : store_(store) {}
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Leaf that never receives a gradient.
  Var<T> constant(BasicTensor<T> value);
  /// Leaf whose gradient is available through grad() after backward().
  Var<T> variable(BasicTensor<T> value);
  /// Leaf bound to a parameter of the store; bound once per tape.
  Var<T> parameter(std::size_t index);
  Var<T> parameter(std::string_view name);

  /// Scalar loss only.
  Gradients<T> backward(Var<T> loss);
  /// Vector-Jacobian product with an explicit upstream gradient.
  Gradients<T> backward(Var<T> output, const BasicTensor<T>& upstream);

  /// Gradient of a variable() leaf from the last backward(); zeros if none.
  BasicTensor<T> grad(Var<T> v) const;

  const BasicTensor<T>& value(std::size_t id) const { return nodes_.at(id).value; }
  bool requires_grad(std::size_t id) const { return nodes_.at(id).requires_grad; }
  const char* op_name(std::size_t id) const { return nodes_.at(id).op; }
  std::size_t size() const { return nodes_.size(); }

  // Op-author interface.
  Var<T> record(const char* op, BasicTensor<T> value, std::vector<std::size_t> inputs,
                BackwardFn backward);
  const BasicTensor<T>& upstream(std::size_t id) const { return *grads_.at(id); }
  /// Mutable gradient slot for input `id`, zero-initialised on first use.
  BasicTensor<T>& grad_slot(std::size_t id);

 private:
  struct Node {
    const char* op;
    BasicTensor<T> value;
    std::vector<std::size_t> inputs;
    BackwardFn backward;
    bool requires_grad = false;
    std::ptrdiff_t param = -1;
  };

  Gradients<T> sweep(std::size_t output);

  const ParameterStore<T>* store_;
  std::vector<Node> nodes_;
  std::vector<std::optional<BasicTensor<T>>> grads_;
  std::vector<std::ptrdiff_t> bound_params_;
};

template <typename T>
const BasicTensor<T>& Var<T>::value() const {
  return tape->value(id);
}

// Output-shape rules shared by the ops and by shape-inference tests. Each
// throws ShapeError naming the op and the offending shapes.
namespace shapes {
Shape conv2d(const Shape& x, const Shape& w, const Shape& b, Padding padding);
Shape max_pool2(const Shape& x);
Shape global_average_pool(const Shape& x);
Shape fully_connected(const Shape& x, const Shape& w, const Shape& b);
Shape batch_norm(const Shape& x, const Shape& gamma, const Shape& beta);
Shape elementwise(const char* op, const Shape& a, const Shape& b);
Shape reshape(const Shape& x, const Shape& target);
}  // namespace shapes

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, Padding padding = Padding::kSame);
template <typename T>
Var<T> relu(Var<T> x);
/// 2x2 window, stride 2, odd trailing row/column dropped.
template <typename T>
Var<T> max_pool2(Var<T> x);
/// [C, H, W] -> [C].
template <typename T>
Var<T> global_average_pool(Var<T> x);
/// x [N, in] or [in]; w [out, in]; b [out].
template <typename T>
Var<T> fully_connected(Var<T> x, Var<T> w, Var<T> b);

/// Running statistics owned by the caller's ParameterStore buffers.
template <typename T>
struct BatchNormState {
  BasicTensor<T>* running_mean = nullptr;
  BasicTensor<T>* running_var = nullptr;
  double momentum = 0.1;
  double eps = 1e-5;
};

/// x [N, F]. Train mode normalises with batch statistics (N >= 2) and
/// updates the running statistics; eval mode uses the running statistics.
template <typename T>
Var<T> batch_norm(Var<T> x, Var<T> gamma, Var<T> beta, const BatchNormState<T>& state,
                  BatchNormMode mode);

/// Row-wise x / max(||x||, eps) over the last axis.
template <typename T>
Var<T> l2_normalize(Var<T> x, double eps = 1e-12);
template <typename T>
Var<T> add(Var<T> a, Var<T> b);
template <typename T>
Var<T> mul(Var<T> a, Var<T> b);
template <typename T>
Var<T> scale(Var<T> x, double factor);
template <typename T>
Var<T> reshape(Var<T> x, Shape shape);
template <typename T>
Var<T> sum(Var<T> x);
template <typename T>
Var<T> mean(Var<T> x);
/// Equal-shaped inputs -> [N, ...].
template <typename T>
Var<T> stack(const std::vector<Var<T>>& xs);
/// Forwards the value; no gradient flows to x.
template <typename T>
Var<T> stop_gradient(Var<T> x);

}  // namespace histoage::ad
