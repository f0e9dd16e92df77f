// Copyright 2026 The HistoAge Authors.
// SPDX-License-Identifier: Apache-2.0

#include "histoage/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <limits>

namespace histoage::ad {

// ---------------------------------------------------------------------------
// ParameterStore

template <typename T>
std::size_t ParameterStore<T>::add_parameter(std::string name, BasicTensor<T> init, bool decay) {
  for (const auto& p : params_)
    if (p.name == name) throw ContractError("duplicate parameter name: " + name);
  params_.push_back({std::move(name), std::move(init), decay});
  return params_.size() - 1;
}

template <typename T>
std::size_t ParameterStore<T>::add_buffer(std::string name, BasicTensor<T> init) {
  for (const auto& b : buffers_)
    if (b.name == name) throw ContractError("duplicate buffer name: " + name);
  buffers_.push_back({std::move(name), std::move(init), false});
  return buffers_.size() - 1;
}

template <typename T>
std::size_t ParameterStore<T>::parameter_index(std::string_view name) const {
  for (std::size_t i = 0; i < params_.size(); ++i)
    if (params_[i].name == name) return i;
  throw ContractError("unknown parameter: " + std::string(name));
}

template <typename T>
std::size_t ParameterStore<T>::buffer_index(std::string_view name) const {
  for (std::size_t i = 0; i < buffers_.size(); ++i)
    if (buffers_[i].name == name) return i;
  throw ContractError("unknown buffer: " + std::string(name));
}

template <typename T>
std::size_t ParameterStore<T>::scalar_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

// ---------------------------------------------------------------------------
// Tape

template <typename T>
Var<T> Tape<T>::record(const char* op, BasicTensor<T> value, std::vector<std::size_t> inputs,
                       BackwardFn backward) {
  bool needs = false;
  for (const std::size_t in : inputs) {
    if (in >= nodes_.size()) throw ContractError(std::string(op) + ": input from another tape");
    needs = needs || nodes_[in].requires_grad;
  }
  Node node{op, std::move(value), std::move(inputs), {}, needs, -1};
  if (needs) node.backward = std::move(backward);
  nodes_.push_back(std::move(node));
  return {this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::constant(BasicTensor<T> value) {
  nodes_.push_back({"constant", std::move(value), {}, {}, false, -1});
  return {this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::variable(BasicTensor<T> value) {
  nodes_.push_back({"variable", std::move(value), {}, {}, true, -1});
  return {this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::parameter(std::size_t index) {
  if (store_ == nullptr) throw ContractError("tape has no parameter store");
  if (index >= store_->parameters().size()) throw ContractError("parameter index out of range");
  if (bound_params_.size() < store_->parameters().size())
    bound_params_.resize(store_->parameters().size(), -1);
  if (bound_params_[index] >= 0) return {this, static_cast<std::size_t>(bound_params_[index])};
  nodes_.push_back({"parameter", store_->parameters()[index].value, {}, {}, true,
                    static_cast<std::ptrdiff_t>(index)});
  bound_params_[index] = static_cast<std::ptrdiff_t>(nodes_.size() - 1);
  return {this, nodes_.size() - 1};
}

template <typename T>
Var<T> Tape<T>::parameter(std::string_view name) {
  if (store_ == nullptr) throw ContractError("tape has no parameter store");
  return parameter(store_->parameter_index(name));
}

template <typename T>
BasicTensor<T>& Tape<T>::grad_slot(std::size_t id) {
  auto& slot = grads_.at(id);
  if (!slot) slot.emplace(nodes_[id].value.shape(), T{0});
  return *slot;
}

template <typename T>
Gradients<T> Tape<T>::backward(Var<T> loss) {
  if (loss.tape != this) throw ContractError("backward: variable from another tape");
  const auto& v = nodes_.at(loss.id).value;
  if (v.size() != 1 || v.rank() != 0)
    throw ShapeError("backward: loss must be a scalar, got " + shape_str(v.shape()));
  grads_.assign(nodes_.size(), std::nullopt);
  grads_[loss.id].emplace(v.shape(), T{1});
  return sweep(loss.id);
}

template <typename T>
Gradients<T> Tape<T>::backward(Var<T> output, const BasicTensor<T>& upstream) {
  if (output.tape != this) throw ContractError("backward: variable from another tape");
  const auto& v = nodes_.at(output.id).value;
  if (upstream.shape() != v.shape())
    throw ShapeError("backward: upstream " + shape_str(upstream.shape()) + " vs output " +
                     shape_str(v.shape()));
  grads_.assign(nodes_.size(), std::nullopt);
  grads_[output.id] = upstream;
  return sweep(output.id);
}

template <typename T>
Gradients<T> Tape<T>::sweep(std::size_t output) {
  for (std::size_t id = output + 1; id-- > 0;) {
    Node& node = nodes_[id];
    if (!node.requires_grad || !grads_[id] || !node.backward) continue;
    node.backward(*this, id);
  }
  Gradients<T> out;
  if (store_ != nullptr) {
    out.reserve(store_->parameters().size());
    for (const auto& p : store_->parameters()) out.emplace_back(p.value.shape(), T{0});
    for (std::size_t i = 0; i < bound_params_.size(); ++i) {
      const auto node = bound_params_[i];
      if (node >= 0 && grads_[static_cast<std::size_t>(node)])
        out[i] = *grads_[static_cast<std::size_t>(node)];
    }
  }
  return out;
}

template <typename T>
BasicTensor<T> Tape<T>::grad(Var<T> v) const {
  if (v.id < grads_.size() && grads_[v.id]) return *grads_[v.id];
  return BasicTensor<T>(nodes_.at(v.id).value.shape(), T{0});
}

// ---------------------------------------------------------------------------
// Shape rules

namespace shapes {

namespace {
[[noreturn]] void fail(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                   shape_str(b));
}
}  // namespace

Shape conv2d(const Shape& x, const Shape& w, const Shape& b, Padding padding) {
  if (x.size() != 3 || w.size() != 4 || w[1] != x[0] || w[2] != w[3]) fail("conv2d", x, w);
  if (b.size() != 1 || b[0] != w[0]) fail("conv2d", w, b);
  const std::size_t k = w[2];
  if (padding == Padding::kSame) {
    if (k % 2 == 0) fail("conv2d", x, w);
    return {w[0], x[1], x[2]};
  }
  if (x[1] < k || x[2] < k) fail("conv2d", x, w);
  return {w[0], x[1] - k + 1, x[2] - k + 1};
}

Shape max_pool2(const Shape& x) {
  if (x.size() != 3 || x[1] < 2 || x[2] < 2) fail("max_pool2", x, Shape{2, 2});
  return {x[0], x[1] / 2, x[2] / 2};
}

Shape global_average_pool(const Shape& x) {
  if (x.size() != 3) fail("global_average_pool", x, Shape{});
  return {x[0]};
}

Shape fully_connected(const Shape& x, const Shape& w, const Shape& b) {
  if (w.size() != 2 || (x.size() != 1 && x.size() != 2) || x.back() != w[1])
    fail("fully_connected", x, w);
  if (b.size() != 1 || b[0] != w[0]) fail("fully_connected", w, b);
  if (x.size() == 1) return {w[0]};
  return {x[0], w[0]};
}

Shape batch_norm(const Shape& x, const Shape& gamma, const Shape& beta) {
  if (x.size() != 2 || gamma.size() != 1 || gamma[0] != x[1]) fail("batch_norm", x, gamma);
  if (beta != gamma) fail("batch_norm", gamma, beta);
  return x;
}

Shape elementwise(const char* op, const Shape& a, const Shape& b) {
  if (a != b) fail(op, a, b);
  return a;
}

Shape reshape(const Shape& x, const Shape& target) {
  if (shape_size(x) != shape_size(target)) fail("reshape", x, target);
  return target;
}

}  // namespace shapes

// ---------------------------------------------------------------------------
// Kernels

namespace {

template <typename T>
void check_same_tape(const char* op, Var<T> a, Var<T> b) {
  if (a.tape != b.tape) throw ContractError(std::string(op) + ": operands on different tapes");
}

// Eight independent partial sums let the compiler vectorise without
// reassociating; the summation order is fixed, so results are reproducible.
template <typename T>
T dot(const T* __restrict a, const T* __restrict b, std::size_t n) {
  T acc[8] = {};
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    for (std::size_t l = 0; l < 8; ++l) acc[l] += a[i + l] * b[i + l];
  T tail = 0;
  for (; i < n; ++i) tail += a[i] * b[i];
  return ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail;
}

template <typename T>
void axpy(T alpha, const T* __restrict x, T* __restrict y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] += alpha * x[i];
}

template <typename T>
std::vector<T> pad_chw(std::span<const T> x, std::size_t c, std::size_t h, std::size_t w,
                       std::size_t pad) {
  const std::size_t hp = h + 2 * pad, wp = w + 2 * pad;
  std::vector<T> out(c * hp * wp, T{0});
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < h; ++y)
      std::copy_n(x.data() + (ch * h + y) * w, w, out.data() + (ch * hp + y + pad) * wp + pad);
  return out;
}

}  // namespace

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> b, Padding padding) {
  check_same_tape("conv2d", x, w);
  check_same_tape("conv2d", x, b);
  Tape<T>& tape = *x.tape;
  const Shape out_shape = shapes::conv2d(x.shape(), w.shape(), b.shape(), padding);
  const std::size_t ci = x.shape()[0], h = x.shape()[1], wd = x.shape()[2];
  const std::size_t co = out_shape[0], ho = out_shape[1], wo = out_shape[2];
  const std::size_t k = w.shape()[2];
  const std::size_t pad = padding == Padding::kSame ? (k - 1) / 2 : 0;
  const std::size_t hp = h + 2 * pad, wp = wd + 2 * pad;

  auto xp = std::make_shared<std::vector<T>>(pad_chw<T>(x.value().data(), ci, h, wd, pad));
  const auto wv = w.value().data();
  const auto bv = b.value().data();
  BasicTensor<T> out(out_shape);
  auto od = out.data();
  for (std::size_t o = 0; o < co; ++o) {
    for (std::size_t y = 0; y < ho; ++y) {
      T* acc = od.data() + (o * ho + y) * wo;
      std::fill_n(acc, wo, bv[o]);
      for (std::size_t c = 0; c < ci; ++c) {
        for (std::size_t ky = 0; ky < k; ++ky) {
          const T* row = xp->data() + (c * hp + y + ky) * wp;
          const T* wrow = wv.data() + ((o * ci + c) * k + ky) * k;
          for (std::size_t kx = 0; kx < k; ++kx) axpy(wrow[kx], row + kx, acc, wo);
        }
      }
    }
  }

  const std::size_t xid = x.id, wid = w.id, bid = b.id;
  return tape.record(
      "conv2d", std::move(out), {xid, wid, bid},
      [=](Tape<T>& t, std::size_t self) {
        const auto go = t.upstream(self).data();
        const auto wvals = t.value(wid).data();
        if (t.requires_grad(wid)) {
          auto gw = t.grad_slot(wid).data();
          for (std::size_t o = 0; o < co; ++o)
            for (std::size_t c = 0; c < ci; ++c)
              for (std::size_t ky = 0; ky < k; ++ky)
                for (std::size_t kx = 0; kx < k; ++kx) {
                  T s = 0;
                  for (std::size_t y = 0; y < ho; ++y)
                    s += dot(go.data() + (o * ho + y) * wo,
                             xp->data() + (c * hp + y + ky) * wp + kx, wo);
                  gw[((o * ci + c) * k + ky) * k + kx] += s;
                }
        }
        if (t.requires_grad(bid)) {
          auto gb = t.grad_slot(bid).data();
          for (std::size_t o = 0; o < co; ++o) {
            T s = 0;
            for (std::size_t y = 0; y < ho; ++y) {
              const T* row = go.data() + (o * ho + y) * wo;
              for (std::size_t xx = 0; xx < wo; ++xx) s += row[xx];
            }
            gb[o] += s;
          }
        }
        if (t.requires_grad(xid)) {
          std::vector<T> gxp(ci * hp * wp, T{0});
          for (std::size_t c = 0; c < ci; ++c)
            for (std::size_t py = 0; py < hp; ++py) {
              T* acc = gxp.data() + (c * hp + py) * wp;
              for (std::size_t o = 0; o < co; ++o)
                for (std::size_t ky = 0; ky < k; ++ky) {
                  if (py < ky || py - ky >= ho) continue;
                  const T* grow = go.data() + (o * ho + py - ky) * wo;
                  const T* wrow = wvals.data() + ((o * ci + c) * k + ky) * k;
                  for (std::size_t kx = 0; kx < k; ++kx) axpy(wrow[kx], grow, acc + kx, wo);
                }
            }
          auto gx = t.grad_slot(xid).data();
          for (std::size_t c = 0; c < ci; ++c)
            for (std::size_t y = 0; y < h; ++y) {
              const T* src = gxp.data() + (c * hp + y + pad) * wp + pad;
              T* dst = gx.data() + (c * h + y) * wd;
              for (std::size_t xx = 0; xx < wd; ++xx) dst[xx] += src[xx];
            }
        }
      });
}

template <typename T>
Var<T> relu(Var<T> x) {
  BasicTensor<T> out = x.value();
  for (auto& v : out.data()) v = v > T{0} ? v : T{0};
  const std::size_t xid = x.id;
  return x.tape->record("relu", std::move(out), {xid}, [xid](Tape<T>& t, std::size_t self) {
    const auto go = t.upstream(self).data();
    const auto y = t.value(self).data();
    auto gx = t.grad_slot(xid).data();
    for (std::size_t i = 0; i < gx.size(); ++i)
      if (y[i] > T{0}) gx[i] += go[i];
  });
}

template <typename T>
Var<T> max_pool2(Var<T> x) {
  const Shape out_shape = shapes::max_pool2(x.shape());
  const std::size_t c = x.shape()[0], h = x.shape()[1], w = x.shape()[2];
  const std::size_t ho = out_shape[1], wo = out_shape[2];
  const auto xv = x.value().data();
  BasicTensor<T> out(out_shape);
  auto od = out.data();
  auto argmax = std::make_shared<std::vector<std::uint32_t>>(od.size());
  for (std::size_t ch = 0; ch < c; ++ch)
    for (std::size_t y = 0; y < ho; ++y)
      for (std::size_t xx = 0; xx < wo; ++xx) {
        std::size_t best = (ch * h + 2 * y) * w + 2 * xx;
        for (std::size_t dy = 0; dy < 2; ++dy)
          for (std::size_t dx = 0; dx < 2; ++dx) {
            const std::size_t idx = (ch * h + 2 * y + dy) * w + 2 * xx + dx;
            if (xv[idx] > xv[best]) best = idx;
          }
        const std::size_t o = (ch * ho + y) * wo + xx;
        od[o] = xv[best];
        (*argmax)[o] = static_cast<std::uint32_t>(best);
      }
  const std::size_t xid = x.id;
  return x.tape->record("max_pool2", std::move(out), {xid},
                        [xid, argmax](Tape<T>& t, std::size_t self) {
                          const auto go = t.upstream(self).data();
                          auto gx = t.grad_slot(xid).data();
                          for (std::size_t i = 0; i < go.size(); ++i) gx[(*argmax)[i]] += go[i];
                        });
}

template <typename T>
Var<T> global_average_pool(Var<T> x) {
  const Shape out_shape = shapes::global_average_pool(x.shape());
  const std::size_t c = x.shape()[0], hw = x.shape()[1] * x.shape()[2];
  const auto xv = x.value().data();
  BasicTensor<T> out(out_shape);
  for (std::size_t ch = 0; ch < c; ++ch) {
    T s = 0;
    for (std::size_t i = 0; i < hw; ++i) s += xv[ch * hw + i];
    out[ch] = s / static_cast<T>(hw);
  }
  const std::size_t xid = x.id;
  return x.tape->record("global_average_pool", std::move(out), {xid},
                        [xid, c, hw](Tape<T>& t, std::size_t self) {
                          const auto go = t.upstream(self).data();
                          auto gx = t.grad_slot(xid).data();
                          const T inv = T{1} / static_cast<T>(hw);
                          for (std::size_t ch = 0; ch < c; ++ch)
                            for (std::size_t i = 0; i < hw; ++i) gx[ch * hw + i] += go[ch] * inv;
                        });
}

template <typename T>
Var<T> fully_connected(Var<T> x, Var<T> w, Var<T> b) {
  check_same_tape("fully_connected", x, w);
  check_same_tape("fully_connected", x, b);
  const Shape out_shape = shapes::fully_connected(x.shape(), w.shape(), b.shape());
  const std::size_t n = x.shape().size() == 1 ? 1 : x.shape()[0];
  const std::size_t in = w.shape()[1], outw = w.shape()[0];
  const auto xv = x.value().data();
  const auto wv = w.value().data();
  const auto bv = b.value().data();
  BasicTensor<T> out(out_shape);
  auto od = out.data();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t o = 0; o < outw; ++o)
      od[r * outw + o] = bv[o] + dot(xv.data() + r * in, wv.data() + o * in, in);

  const std::size_t xid = x.id, wid = w.id, bid = b.id;
  return x.tape->record(
      "fully_connected", std::move(out), {xid, wid, bid},
      [=](Tape<T>& t, std::size_t self) {
        const auto go = t.upstream(self).data();
        const auto xvals = t.value(xid).data();
        const auto wvals = t.value(wid).data();
        if (t.requires_grad(wid)) {
          auto gw = t.grad_slot(wid).data();
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t o = 0; o < outw; ++o)
              axpy(go[r * outw + o], xvals.data() + r * in, gw.data() + o * in, in);
        }
        if (t.requires_grad(bid)) {
          auto gb = t.grad_slot(bid).data();
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t o = 0; o < outw; ++o) gb[o] += go[r * outw + o];
        }
        if (t.requires_grad(xid)) {
          auto gx = t.grad_slot(xid).data();
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t o = 0; o < outw; ++o)
              axpy(go[r * outw + o], wvals.data() + o * in, gx.data() + r * in, in);
        }
      });
}

template <typename T>
Var<T> batch_norm(Var<T> x, Var<T> gamma, Var<T> beta, const BatchNormState<T>& state,
                  BatchNormMode mode) {
  check_same_tape("batch_norm", x, gamma);
  check_same_tape("batch_norm", x, beta);
  const Shape out_shape = shapes::batch_norm(x.shape(), gamma.shape(), beta.shape());
  const std::size_t n = out_shape[0], f = out_shape[1];
  if (state.running_mean == nullptr || state.running_var == nullptr ||
      state.running_mean->shape() != gamma.shape() || state.running_var->shape() != gamma.shape())
    throw ShapeError("batch_norm: running statistics missing or mis-shaped for " +
                     shape_str(gamma.shape()));
  const auto xv = x.value().data();
  const auto gv = gamma.value().data();
  const auto bv = beta.value().data();

  auto xhat = std::make_shared<std::vector<T>>(n * f);
  auto inv_std = std::make_shared<std::vector<T>>(f);
  BasicTensor<T> out(out_shape);
  auto od = out.data();
  const bool train = mode == BatchNormMode::kTrain;
  if (train && n < 2) throw ShapeError("batch_norm: train mode needs batch >= 2, got " + shape_str(x.shape()));

  for (std::size_t j = 0; j < f; ++j) {
    T mu, var;
    if (train) {
      T s = 0;
      for (std::size_t r = 0; r < n; ++r) s += xv[r * f + j];
      mu = s / static_cast<T>(n);
      T ss = 0;
      for (std::size_t r = 0; r < n; ++r) {
        const T d = xv[r * f + j] - mu;
        ss += d * d;
      }
      var = ss / static_cast<T>(n);
      const T m = static_cast<T>(state.momentum);
      (*state.running_mean)[j] = (T{1} - m) * (*state.running_mean)[j] + m * mu;
      (*state.running_var)[j] =
          (T{1} - m) * (*state.running_var)[j] + m * ss / static_cast<T>(n - 1);
    } else {
      mu = (*state.running_mean)[j];
      var = (*state.running_var)[j];
    }
    const T is = T{1} / std::sqrt(var + static_cast<T>(state.eps));
    (*inv_std)[j] = is;
    for (std::size_t r = 0; r < n; ++r) {
      const T xh = (xv[r * f + j] - mu) * is;
      (*xhat)[r * f + j] = xh;
      od[r * f + j] = gv[j] * xh + bv[j];
    }
  }

  const std::size_t xid = x.id, gid = gamma.id, bid = beta.id;
  return x.tape->record(
      "batch_norm", std::move(out), {xid, gid, bid},
      [=](Tape<T>& t, std::size_t self) {
        const auto go = t.upstream(self).data();
        const auto gvals = t.value(gid).data();
        if (t.requires_grad(gid) || t.requires_grad(bid)) {
          std::vector<T> dg(f, T{0}), db(f, T{0});
          for (std::size_t r = 0; r < n; ++r)
            for (std::size_t j = 0; j < f; ++j) {
              dg[j] += go[r * f + j] * (*xhat)[r * f + j];
              db[j] += go[r * f + j];
            }
          if (t.requires_grad(gid)) {
            auto g = t.grad_slot(gid).data();
            for (std::size_t j = 0; j < f; ++j) g[j] += dg[j];
          }
          if (t.requires_grad(bid)) {
            auto g = t.grad_slot(bid).data();
            for (std::size_t j = 0; j < f; ++j) g[j] += db[j];
          }
        }
        if (!t.requires_grad(xid)) return;
        auto gx = t.grad_slot(xid).data();
        for (std::size_t j = 0; j < f; ++j) {
          if (!train) {
            for (std::size_t r = 0; r < n; ++r)
              gx[r * f + j] += go[r * f + j] * gvals[j] * (*inv_std)[j];
            continue;
          }
          T sum_g = 0, sum_gx = 0;
          for (std::size_t r = 0; r < n; ++r) {
            const T g = go[r * f + j] * gvals[j];
            sum_g += g;
            sum_gx += g * (*xhat)[r * f + j];
          }
          const T nn = static_cast<T>(n);
          for (std::size_t r = 0; r < n; ++r) {
            const T g = go[r * f + j] * gvals[j];
            gx[r * f + j] +=
                (*inv_std)[j] / nn * (nn * g - sum_g - (*xhat)[r * f + j] * sum_gx);
          }
        }
      });
}

template <typename T>
Var<T> l2_normalize(Var<T> x, double eps) {
  const Shape& s = x.shape();
  if (s.empty()) throw ShapeError("l2_normalize: scalar input " + shape_str(s));
  const std::size_t f = s.back();
  const std::size_t rows = x.value().size() / f;
  const auto xv = x.value().data();
  BasicTensor<T> out(s);
  auto norms = std::make_shared<std::vector<T>>(rows);
  auto clamped = std::make_shared<std::vector<bool>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T nrm = std::sqrt(dot(xv.data() + r * f, xv.data() + r * f, f));
    const bool c = nrm <= static_cast<T>(eps);
    const T d = c ? static_cast<T>(eps) : nrm;
    (*norms)[r] = d;
    (*clamped)[r] = c;
    for (std::size_t j = 0; j < f; ++j) out[r * f + j] = xv[r * f + j] / d;
  }
  const std::size_t xid = x.id;
  return x.tape->record("l2_normalize", std::move(out), {xid},
                        [=](Tape<T>& t, std::size_t self) {
                          const auto go = t.upstream(self).data();
                          const auto y = t.value(self).data();
                          auto gx = t.grad_slot(xid).data();
                          for (std::size_t r = 0; r < rows; ++r) {
                            const T d = (*norms)[r];
                            const T yg = (*clamped)[r] ? T{0} : dot(y.data() + r * f, go.data() + r * f, f);
                            for (std::size_t j = 0; j < f; ++j)
                              gx[r * f + j] += (go[r * f + j] - y[r * f + j] * yg) / d;
                          }
                        });
}

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  check_same_tape("add", a, b);
  const Shape s = shapes::elementwise("add", a.shape(), b.shape());
  BasicTensor<T> out = a.value();
  const auto bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
  const std::size_t aid = a.id, bid = b.id;
  return a.tape->record("add", std::move(out), {aid, bid}, [aid, bid](Tape<T>& t, std::size_t self) {
    const auto go = t.upstream(self).data();
    for (const std::size_t in : {aid, bid}) {
      if (!t.requires_grad(in)) continue;
      auto g = t.grad_slot(in).data();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i];
    }
  });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  check_same_tape("mul", a, b);
  shapes::elementwise("mul", a.shape(), b.shape());
  BasicTensor<T> out = a.value();
  const auto bv = b.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= bv[i];
  const std::size_t aid = a.id, bid = b.id;
  return a.tape->record("mul", std::move(out), {aid, bid}, [aid, bid](Tape<T>& t, std::size_t self) {
    const auto go = t.upstream(self).data();
    const auto av = t.value(aid).data();
    const auto bvals = t.value(bid).data();
    if (t.requires_grad(aid)) {
      auto g = t.grad_slot(aid).data();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * bvals[i];
    }
    if (t.requires_grad(bid)) {
      auto g = t.grad_slot(bid).data();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * av[i];
    }
  });
}

template <typename T>
Var<T> scale(Var<T> x, double factor) {
  BasicTensor<T> out = x.value();
  const T f = static_cast<T>(factor);
  for (auto& v : out.data()) v *= f;
  const std::size_t xid = x.id;
  return x.tape->record("scale", std::move(out), {xid}, [xid, f](Tape<T>& t, std::size_t self) {
    const auto go = t.upstream(self).data();
    auto g = t.grad_slot(xid).data();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i] * f;
  });
}

template <typename T>
Var<T> reshape(Var<T> x, Shape shape) {
  BasicTensor<T> out = x.value().reshaped(shapes::reshape(x.shape(), shape));
  const std::size_t xid = x.id;
  return x.tape->record("reshape", std::move(out), {xid}, [xid](Tape<T>& t, std::size_t self) {
    const auto go = t.upstream(self).data();
    auto g = t.grad_slot(xid).data();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += go[i];
  });
}

template <typename T>
Var<T> sum(Var<T> x) {
  const auto xv = x.value().data();
  T s = 0;
  for (const T v : xv) s += v;
  const std::size_t xid = x.id;
  return x.tape->record("sum", BasicTensor<T>::scalar(s), {xid}, [xid](Tape<T>& t, std::size_t self) {
    const T go = t.upstream(self)[0];
    auto g = t.grad_slot(xid).data();
    for (auto& v : g) v += go;
  });
}

template <typename T>
Var<T> mean(Var<T> x) {
  return scale(sum(x), 1.0 / static_cast<double>(x.value().size()));
}

template <typename T>
Var<T> stack(const std::vector<Var<T>>& xs) {
  if (xs.empty()) throw ContractError("stack: no inputs");
  Tape<T>* tape = xs.front().tape;
  const Shape& inner = xs.front().shape();
  const std::size_t m = xs.front().value().size();
  Shape shape{xs.size()};
  shape.insert(shape.end(), inner.begin(), inner.end());
  std::vector<T> flat;
  flat.reserve(xs.size() * m);
  std::vector<std::size_t> ids;
  for (const auto& x : xs) {
    if (x.tape != tape) throw ContractError("stack: inputs from different tapes");
    if (x.shape() != inner) throw ShapeError("stack: " + shape_str(inner) + " vs " + shape_str(x.shape()));
    const auto v = x.value().data();
    flat.insert(flat.end(), v.begin(), v.end());
    ids.push_back(x.id);
  }
  return tape->record("stack", BasicTensor<T>(std::move(shape), std::move(flat)), ids,
                      [ids, m](Tape<T>& t, std::size_t self) {
                        const auto go = t.upstream(self).data();
                        for (std::size_t k = 0; k < ids.size(); ++k) {
                          if (!t.requires_grad(ids[k])) continue;
                          auto g = t.grad_slot(ids[k]).data();
                          for (std::size_t i = 0; i < m; ++i) g[i] += go[k * m + i];
                        }
                      });
}

template <typename T>
Var<T> stop_gradient(Var<T> x) {
  return x.tape->constant(x.value());
}

#define HISTOAGE_INSTANTIATE(T)                                                              \
  template class ParameterStore<T>;                                                          \
  template class Tape<T>;                                                                    \
  template Var<T> conv2d(Var<T>, Var<T>, Var<T>, Padding);                                   \
  template Var<T> relu(Var<T>);                                                              \
  template Var<T> max_pool2(Var<T>);                                                         \
  template Var<T> global_average_pool(Var<T>);                                               \
  template Var<T> fully_connected(Var<T>, Var<T>, Var<T>);                                   \
  template Var<T> batch_norm(Var<T>, Var<T>, Var<T>, const BatchNormState<T>&, BatchNormMode); \
  template Var<T> l2_normalize(Var<T>, double);                                              \
  template Var<T> add(Var<T>, Var<T>);                                                       \
  template Var<T> mul(Var<T>, Var<T>);                                                       \
  template Var<T> scale(Var<T>, double);                                                     \
  template Var<T> reshape(Var<T>, Shape);                                                    \
  template Var<T> sum(Var<T>);                                                               \
  template Var<T> mean(Var<T>);                                                              \
  template Var<T> stack(const std::vector<Var<T>>&);                                         \
  template Var<T> stop_gradient(Var<T>);

HISTOAGE_INSTANTIATE(float)
HISTOAGE_INSTANTIATE(double)

#undef HISTOAGE_INSTANTIATE

}  // namespace histoage::ad
