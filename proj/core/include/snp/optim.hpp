#pragma once

#include <cmath>
#include <unordered_map>
#include <vector>

#include "snp/nn.hpp"
#include "snp/tensor.hpp"

namespace snp {

/// Adam with bias correction and optional global-norm gradient clipping.
template <class T>
class Adam {
 public:
  struct State {
    Tensor<T> m, v;
  };

  Adam(ParamStore<T>& params, double lr, double clip_norm = 0.0, double beta1 = 0.9,
       double beta2 = 0.999, double eps = 1e-8)
      : params_(&params), lr_(lr), clip_(clip_norm), b1_(beta1), b2_(beta2), eps_(eps) {
    for (auto& p : params) state_[p.name] = State{Tensor<T>(p.value.shape), Tensor<T>(p.value.shape)};
  }

  /// One update from the gradients currently in Param::grad. `scale` divides
  /// the gradient first (e.g. 1/batch for accumulated minibatches).
  void step(double scale = 1.0) {
    ++t_;
    double norm_sq = 0.0;
    if (clip_ > 0.0) {
      for (auto& p : *params_)
        for (T g : p.grad.data) {
          const double gs = static_cast<double>(g) * scale;
          norm_sq += gs * gs;
        }
    }
    double mult = scale;
    if (clip_ > 0.0) {
      const double norm = std::sqrt(norm_sq);
      if (norm > clip_) mult = scale * clip_ / norm;
    }
    const double bc1 = 1.0 - std::pow(b1_, t_);
    const double bc2 = 1.0 - std::pow(b2_, t_);
    for (auto& p : *params_) {
      auto& st = state_[p.name];
      for (int i = 0; i < p.value.numel(); ++i) {
        const double g = static_cast<double>(p.grad[i]) * mult;
        const double m = b1_ * st.m[i] + (1.0 - b1_) * g;
        const double v = b2_ * st.v[i] + (1.0 - b2_) * g * g;
        st.m[i] = static_cast<T>(m);
        st.v[i] = static_cast<T>(v);
        p.value[i] -= static_cast<T>(lr_ * (m / bc1) / (std::sqrt(v / bc2) + eps_));
      }
    }
  }

  int64_t iteration() const { return t_; }
  void set_iteration(int64_t t) { t_ = t; }
  State* state_of(const std::string& name) {
    auto it = state_.find(name);
    return it == state_.end() ? nullptr : &it->second;
  }

 private:
  ParamStore<T>* params_;
  double lr_, clip_, b1_, b2_, eps_;
  int64_t t_ = 0;
  std::unordered_map<std::string, State> state_;
};

}  // namespace snp
