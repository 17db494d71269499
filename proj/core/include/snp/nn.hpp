#pragma once

#include <cmath>
#include <deque>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "snp/rng.hpp"
#include "snp/tape.hpp"
#include "snp/tensor.hpp"

namespace snp {

/// Owns every trainable tensor of a model. Deque keeps addresses stable so
/// layers can hold raw pointers.
template <class T>
class ParamStore {
 public:
  Param<T>& add(std::string name, std::vector<int> shape) {
    params_.push_back(Param<T>{std::move(name), Tensor<T>(shape), Tensor<T>(shape)});
    return params_.back();
  }

  Param<T>* find(const std::string& name) {
    for (auto& p : params_)
      if (p.name == name) return &p;
    return nullptr;
  }

  void zero_grads() {
    for (auto& p : params_) p.zero_grad();
  }

  size_t total_size() const {
    size_t n = 0;
    for (const auto& p : params_) n += p.value.data.size();
    return n;
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }
  size_t count() const { return params_.size(); }

 private:
  std::deque<Param<T>> params_;
};

namespace init {

/// Glorot-uniform fill.
template <class T>
void glorot(Tensor<T>& w, int fan_in, int fan_out, Rng& rng) {
  const double limit = std::sqrt(6.0 / (fan_in + fan_out));
  for (auto& v : w.data) v = static_cast<T>(rng.uniform(-limit, limit));
}

template <class T>
void normal(Tensor<T>& w, double std, Rng& rng) {
  for (auto& v : w.data) v = static_cast<T>(rng.normal(0.0, std));
}

/// Small uniform bias init; keeps ReLU pre-activations off the exact kink
/// even when every fan-in unit is dead.
template <class T>
void bias(Tensor<T>& b, Rng& rng) {
  for (auto& v : b.data) v = static_cast<T>(rng.uniform(-0.05, 0.05));
}

}  // namespace init

/// y = W x + b (vector path) or Y = X Wᵀ + b (row-batched path).
template <class T>
struct Dense {
  Param<T>* W = nullptr;  // [out, in]
  Param<T>* b = nullptr;  // [out]
  int in = 0, out = 0;

  Dense() = default;
  Dense(ParamStore<T>& ps, const std::string& name, int in_, int out_, Rng& rng)
      : in(in_), out(out_) {
    W = &ps.add(name + ".W", {out, in});
    b = &ps.add(name + ".b", {out});
    init::glorot(W->value, in, out, rng);
    init::bias(b->value, rng);
  }

  Var apply(Tape<T>& t, Var x) const {
    return t.add(t.matvec(t.param(*W), x), t.param(*b));
  }

  /// X [m,in] -> [m,out]
  Var apply_rows(Tape<T>& t, Var X) const {
    return t.add_rowvec(t.matmul(X, t.param(*W), false, true), t.param(*b));
  }
};

/// Stack of Dense layers with ReLU between (and optionally after) them.
template <class T>
struct Mlp {
  std::vector<Dense<T>> layers;
  bool relu_after_last = false;

  Mlp() = default;
  Mlp(ParamStore<T>& ps, const std::string& name, const std::vector<int>& dims, Rng& rng,
      bool relu_last = false)
      : relu_after_last(relu_last) {
    for (size_t i = 0; i + 1 < dims.size(); ++i)
      layers.emplace_back(ps, name + ".l" + std::to_string(i), dims[i], dims[i + 1], rng);
  }

  Var apply(Tape<T>& t, Var x) const {
    for (size_t i = 0; i < layers.size(); ++i) {
      x = layers[i].apply(t, x);
      if (i + 1 < layers.size() || relu_after_last) x = t.relu(x);
    }
    return x;
  }

  Var apply_rows(Tape<T>& t, Var X) const {
    for (size_t i = 0; i < layers.size(); ++i) {
      X = layers[i].apply_rows(t, X);
      if (i + 1 < layers.size() || relu_after_last) X = t.relu(X);
    }
    return X;
  }
};

/// Standard LSTM cell, gate order (i, f, g, o), forget-gate bias init 1.0.
template <class T>
struct LstmCell {
  Param<T>* W = nullptr;  // [4*hid, in+hid]
  Param<T>* b = nullptr;  // [4*hid]
  int in = 0, hid = 0;

  LstmCell() = default;
  LstmCell(ParamStore<T>& ps, const std::string& name, int in_, int hid_, Rng& rng)
      : in(in_), hid(hid_) {
    W = &ps.add(name + ".W", {4 * hid, in + hid});
    b = &ps.add(name + ".b", {4 * hid});
    init::glorot(W->value, in + hid, 4 * hid, rng);
    init::bias(b->value, rng);
    for (int i = hid; i < 2 * hid; ++i) b->value[i] += T(1);  // forget gate
  }

  /// Returns (h', c').
  std::pair<Var, Var> step(Tape<T>& t, Var x, Var h, Var c) const {
    Var gates = t.add(t.matvec(t.param(*W), t.concat0(x, h)), t.param(*b));
    Var i = t.sigmoid(t.slice0(gates, 0, hid));
    Var f = t.sigmoid(t.slice0(gates, hid, hid));
    Var g = t.tanh_(t.slice0(gates, 2 * hid, hid));
    Var o = t.sigmoid(t.slice0(gates, 3 * hid, hid));
    Var c2 = t.add(t.mul(f, c), t.mul(i, g));
    Var h2 = t.mul(o, t.tanh_(c2));
    return {h2, c2};
  }
};

template <class T>
struct Conv {
  Param<T>* W = nullptr;  // [Cout,Cin,k,k]
  Param<T>* b = nullptr;  // [Cout]
  int stride = 1, pad = 0;

  Conv() = default;
  Conv(ParamStore<T>& ps, const std::string& name, int cin, int cout, int k, int stride_, int pad_,
       Rng& rng)
      : stride(stride_), pad(pad_) {
    W = &ps.add(name + ".W", {cout, cin, k, k});
    b = &ps.add(name + ".b", {cout});
    init::glorot(W->value, cin * k * k, cout * k * k, rng);
    init::bias(b->value, rng);
  }

  Var apply(Tape<T>& t, Var x) const {
    return t.conv2d(x, t.param(*W), t.param(*b), stride, pad);
  }
};

template <class T>
struct ConvT {
  Param<T>* W = nullptr;  // [Cin,Cout,k,k]
  Param<T>* b = nullptr;
  int stride = 1, pad = 0;

  ConvT() = default;
  ConvT(ParamStore<T>& ps, const std::string& name, int cin, int cout, int k, int stride_,
        int pad_, Rng& rng)
      : stride(stride_), pad(pad_) {
    W = &ps.add(name + ".W", {cin, cout, k, k});
    b = &ps.add(name + ".b", {cout});
    init::glorot(W->value, cin * k * k, cout * k * k, rng);
    init::bias(b->value, rng);
  }

  Var apply(Tape<T>& t, Var x) const {
    return t.conv_transpose2d(x, t.param(*W), t.param(*b), stride, pad);
  }
};

/// LSTM cell with convolutional gates over [C,H,W] states; 3x3 kernels,
/// forget-gate bias init 1.0.
template <class T>
struct ConvLstmCell {
  Param<T>* W = nullptr;  // [4*hid, in+hid, k, k]
  Param<T>* b = nullptr;  // [4*hid]
  int in = 0, hid = 0, k = 3;

  ConvLstmCell() = default;
  ConvLstmCell(ParamStore<T>& ps, const std::string& name, int in_, int hid_, Rng& rng, int k_ = 3)
      : in(in_), hid(hid_), k(k_) {
    W = &ps.add(name + ".W", {4 * hid, in + hid, k, k});
    b = &ps.add(name + ".b", {4 * hid});
    init::glorot(W->value, (in + hid) * k * k, 4 * hid * k * k, rng);
    init::bias(b->value, rng);
    for (int i = hid; i < 2 * hid; ++i) b->value[i] += T(1);
  }

  std::pair<Var, Var> step(Tape<T>& t, Var x, Var h, Var c) const {
    Var gates = t.conv2d(t.concat0(x, h), t.param(*W), t.param(*b), 1, k / 2);
    const int hw = t.val(h).shape[1];
    const int ww = t.val(h).shape[2];
    (void)hw;
    (void)ww;
    Var i = t.sigmoid(t.slice0(gates, 0, hid));
    Var f = t.sigmoid(t.slice0(gates, hid, hid));
    Var g = t.tanh_(t.slice0(gates, 2 * hid, hid));
    Var o = t.sigmoid(t.slice0(gates, 3 * hid, hid));
    Var c2 = t.add(t.mul(f, c), t.mul(i, g));
    Var h2 = t.mul(o, t.tanh_(c2));
    return {h2, c2};
  }
};

/// Latent std parameterization: 0.1 + 0.9 * sigmoid(raw); keeps stds in
/// (0.1, 1.0) so the KL and the reparameterized sample stay well-behaved.
template <class T>
inline Var latent_std(Tape<T>& t, Var raw) {
  return t.add_scalar(t.scale(t.sigmoid(raw), T(0.9)), T(0.1));
}

inline constexpr double kLatentStdFloor = 0.1;

/// Decoder std parameterization: softplus(raw) + 1e-3.
template <class T>
inline Var decoder_std(Tape<T>& t, Var raw) {
  return t.add_scalar(t.softplus(raw), T(1e-3));
}

inline constexpr double kDecoderStdFloor = 1e-3;

}  // namespace snp
