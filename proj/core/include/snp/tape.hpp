#pragma once

#include <cmath>
#include <deque>
#include <functional>
#include <stdexcept>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "snp/tensor.hpp"

namespace snp {

/// Handle into a Tape. Plain index; only meaningful for the tape that made it.
struct Var {
  int32_t id = -1;
  bool valid() const { return id >= 0; }
};

/// A trainable tensor. Gradients accumulate into `grad` across tape flushes,
/// which is what batch accumulation relies on.
template <class T>
struct Param {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  void zero_grad() { std::fill(grad.data.begin(), grad.data.end(), T(0)); }
};

namespace detail {

template <class T>
using EMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using EMap = Eigen::Map<EMat<T>>;
template <class T>
using ECMap = Eigen::Map<const EMat<T>>;

/// C (+)= op(A) * op(B); all row-major.
template <class T>
void gemm(const T* a, int ar, int ac, bool ta, const T* b, int br, int bc, bool tb, T* c,
          bool accumulate) {
  ECMap<T> A(a, ar, ac);
  ECMap<T> B(b, br, bc);
  const int m = ta ? ac : ar;
  const int n = tb ? br : bc;
  EMap<T> C(c, m, n);
  if (!ta && !tb) {
    if (accumulate) C.noalias() += A * B; else C.noalias() = A * B;
  } else if (ta && !tb) {
    if (accumulate) C.noalias() += A.transpose() * B; else C.noalias() = A.transpose() * B;
  } else if (!ta && tb) {
    if (accumulate) C.noalias() += A * B.transpose(); else C.noalias() = A * B.transpose();
  } else {
    if (accumulate) C.noalias() += A.transpose() * B.transpose();
    else C.noalias() = A.transpose() * B.transpose();
  }
}

inline int conv_out(int in, int k, int stride, int pad) { return (in + 2 * pad - k) / stride + 1; }

/// im2col for [C,H,W] -> cols [C*kh*kw, Ho*Wo].
template <class T>
void im2col(const T* x, int C, int H, int W, int kh, int kw, int stride, int pad, T* cols) {
  const int Ho = conv_out(H, kh, stride, pad);
  const int Wo = conv_out(W, kw, stride, pad);
  const int span = Ho * Wo;
  for (int c = 0; c < C; ++c) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        T* row = cols + ((c * kh + ki) * kw + kj) * span;
        for (int oi = 0; oi < Ho; ++oi) {
          const int ii = oi * stride - pad + ki;
          if (ii < 0 || ii >= H) {
            for (int oj = 0; oj < Wo; ++oj) row[oi * Wo + oj] = T(0);
            continue;
          }
          const T* src = x + (c * H + ii) * W;
          for (int oj = 0; oj < Wo; ++oj) {
            const int jj = oj * stride - pad + kj;
            row[oi * Wo + oj] = (jj < 0 || jj >= W) ? T(0) : src[jj];
          }
        }
      }
    }
  }
}

/// Scatter-add inverse of im2col: cols [C*kh*kw, Ho*Wo] -> x [C,H,W].
template <class T>
void col2im(const T* cols, int C, int H, int W, int kh, int kw, int stride, int pad, T* x) {
  const int Ho = conv_out(H, kh, stride, pad);
  const int Wo = conv_out(W, kw, stride, pad);
  const int span = Ho * Wo;
  for (int c = 0; c < C; ++c) {
    for (int ki = 0; ki < kh; ++ki) {
      for (int kj = 0; kj < kw; ++kj) {
        const T* row = cols + ((c * kh + ki) * kw + kj) * span;
        for (int oi = 0; oi < Ho; ++oi) {
          const int ii = oi * stride - pad + ki;
          if (ii < 0 || ii >= H) continue;
          T* dst = x + (c * H + ii) * W;
          for (int oj = 0; oj < Wo; ++oj) {
            const int jj = oj * stride - pad + kj;
            if (jj >= 0 && jj < W) dst[jj] += row[oi * Wo + oj];
          }
        }
      }
    }
  }
}

}  // namespace detail

/// Reverse-mode autodiff tape. One tape per forward pass; backward() walks the
/// recording in reverse and accumulates parameter gradients into Param::grad.
template <class T>
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  // ---- leaves ----

  Var constant(Tensor<T> v) { return push(std::move(v), false); }

  Var scalar_const(T v) { return constant(Tensor<T>::scalar(v)); }

  Var param(Param<T>& p) {
    if (!grad_enabled_) return constant(Tensor<T>(p.value));
    Var out = push(Tensor<T>(p.value), true);
    param_hooks_.push_back({&p, out.id});
    return out;
  }

  /// Evaluation mode: parameters enter as constants, no backward graph.
  void set_grad_enabled(bool on) { grad_enabled_ = on; }
  bool grad_enabled() const { return grad_enabled_; }

  const Tensor<T>& val(Var v) const { return nodes_[v.id].val; }
  const Tensor<T>& grad(Var v) const { return nodes_[v.id].grad; }
  int numel(Var v) const { return nodes_[v.id].val.numel(); }
  size_t size() const { return nodes_.size(); }

  // ---- elementwise ----

  Var add(Var a, Var b) {
    check_same(a, b, "add");
    Tensor<T> out = val(a);
    const auto& vb = val(b);
    for (int i = 0; i < out.numel(); ++i) out[i] += vb[i];
    Var o = push(std::move(out), needs(a) || needs(b));
    if (needs(o))
      bk(o, [a, b, o](Tape& t) {
        t.accumulate(a, t.nodes_[o.id].grad.data.data());
        t.accumulate(b, t.nodes_[o.id].grad.data.data());
      });
    return o;
  }

  Var addn(const std::vector<Var>& xs) {
    if (xs.empty()) throw std::invalid_argument("addn: empty");
    if (xs.size() == 1) return xs[0];
    Tensor<T> out = val(xs[0]);
    bool ng = needs(xs[0]);
    for (size_t j = 1; j < xs.size(); ++j) {
      check_same(xs[0], xs[j], "addn");
      const auto& vj = val(xs[j]);
      for (int i = 0; i < out.numel(); ++i) out[i] += vj[i];
      ng = ng || needs(xs[j]);
    }
    Var o = push(std::move(out), ng);
    if (needs(o))
      bk(o, [xs, o](Tape& t) {
        for (Var x : xs) t.accumulate(x, t.nodes_[o.id].grad.data.data());
      });
    return o;
  }

  Var sub(Var a, Var b) {
    check_same(a, b, "sub");
    Tensor<T> out = val(a);
    const auto& vb = val(b);
    for (int i = 0; i < out.numel(); ++i) out[i] -= vb[i];
    Var o = push(std::move(out), needs(a) || needs(b));
    if (needs(o))
      bk(o, [a, b, o](Tape& t) {
        const auto& g = t.nodes_[o.id].grad;
        t.accumulate(a, g.data.data());
        if (t.needs(b)) {
          auto& gb = t.ensure_grad(b);
          for (int i = 0; i < g.numel(); ++i) gb[i] -= g[i];
        }
      });
    return o;
  }

  Var mul(Var a, Var b) {
    check_same(a, b, "mul");
    Tensor<T> out = val(a);
    const auto& vb = val(b);
    for (int i = 0; i < out.numel(); ++i) out[i] *= vb[i];
    Var o = push(std::move(out), needs(a) || needs(b));
    if (needs(o))
      bk(o, [a, b, o](Tape& t) {
        const auto& g = t.nodes_[o.id].grad;
        if (t.needs(a)) {
          auto& ga = t.ensure_grad(a);
          const auto& vb2 = t.val(b);
          for (int i = 0; i < g.numel(); ++i) ga[i] += g[i] * vb2[i];
        }
        if (t.needs(b)) {
          auto& gb = t.ensure_grad(b);
          const auto& va2 = t.val(a);
          for (int i = 0; i < g.numel(); ++i) gb[i] += g[i] * va2[i];
        }
      });
    return o;
  }

  Var scale(Var a, T c) {
    Tensor<T> out = val(a);
    for (auto& v : out.data) v *= c;
    Var o = push(std::move(out), needs(a));
    if (needs(o))
      bk(o, [a, c, o](Tape& t) {
        auto& ga = t.ensure_grad(a);
        const auto& g = t.nodes_[o.id].grad;
        for (int i = 0; i < g.numel(); ++i) ga[i] += c * g[i];
      });
    return o;
  }

  Var add_scalar(Var a, T c) {
    Tensor<T> out = val(a);
    for (auto& v : out.data) v += c;
    Var o = push(std::move(out), needs(a));
    if (needs(o))
      bk(o, [a, o](Tape& t) { t.accumulate(a, t.nodes_[o.id].grad.data.data()); });
    return o;
  }

  Var neg(Var a) { return scale(a, T(-1)); }

  Var relu(Var a) {
    Tensor<T> out = val(a);
    for (auto& v : out.data) v = v > T(0) ? v : T(0);
    return unary(a, std::move(out), [](T x, T) { return x > T(0) ? T(1) : T(0); });
  }

  Var sigmoid(Var a) {
    Tensor<T> out = val(a);
    for (auto& v : out.data) v = T(1) / (T(1) + std::exp(-v));
    return unary_from_out(a, std::move(out), [](T, T y) { return y * (T(1) - y); });
  }

  Var tanh_(Var a) {
    Tensor<T> out = val(a);
    for (auto& v : out.data) v = std::tanh(v);
    return unary_from_out(a, std::move(out), [](T, T y) { return T(1) - y * y; });
  }

  Var softplus(Var a) {
    Tensor<T> out = val(a);
    for (auto& v : out.data) v = v > T(20) ? v : std::log1p(std::exp(v));
    return unary(a, std::move(out), [](T x, T) {
      return x > T(20) ? T(1) : T(1) / (T(1) + std::exp(-x));
    });
  }

  Var exp_(Var a) {
    Tensor<T> out = val(a);
    for (auto& v : out.data) v = std::exp(v);
    return unary_from_out(a, std::move(out), [](T, T y) { return y; });
  }

  Var log_(Var a) {
    Tensor<T> out = val(a);
    for (auto& v : out.data) v = std::log(v);
    return unary(a, std::move(out), [](T x, T) { return T(1) / x; });
  }

  Var square(Var a) {
    Tensor<T> out = val(a);
    for (auto& v : out.data) v = v * v;
    return unary(a, std::move(out), [](T x, T) { return T(2) * x; });
  }

  // ---- structure ----

  /// Concatenation along dim 0 (vectors end-to-end, CHW tensors by channel).
  Var concat0(const std::vector<Var>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat0: empty");
    const auto& s0 = val(xs[0]).shape;
    std::vector<int> rest(s0.begin() + 1, s0.end());
    int total = 0;
    bool ng = false;
    for (Var x : xs) {
      const auto& s = val(x).shape;
      if (std::vector<int>(s.begin() + 1, s.end()) != rest)
        throw std::invalid_argument("concat0: trailing dims differ");
      total += s[0];
      ng = ng || needs(x);
    }
    std::vector<int> oshape = {total};
    oshape.insert(oshape.end(), rest.begin(), rest.end());
    Tensor<T> out(oshape);
    size_t off = 0;
    for (Var x : xs) {
      const auto& v = val(x);
      std::copy(v.data.begin(), v.data.end(), out.data.begin() + off);
      off += v.data.size();
    }
    Var o = push(std::move(out), ng);
    if (needs(o))
      bk(o, [xs, o](Tape& t) {
        const auto& g = t.nodes_[o.id].grad;
        size_t pos = 0;
        for (Var x : xs) {
          const size_t n = t.val(x).data.size();
          if (t.needs(x)) {
            auto& gx = t.ensure_grad(x);
            for (size_t i = 0; i < n; ++i) gx.data[i] += g.data[pos + i];
          }
          pos += n;
        }
      });
    return o;
  }

  Var concat0(Var a, Var b) { return concat0(std::vector<Var>{a, b}); }

  /// Contiguous slice along dim 0.
  Var slice0(Var a, int start, int len) {
    const auto& v = val(a);
    if (start < 0 || len <= 0 || start + len > v.shape[0])
      throw std::invalid_argument("slice0: out of range");
    std::vector<int> oshape = v.shape;
    oshape[0] = len;
    const int inner = v.numel() / v.shape[0];
    Tensor<T> out(oshape);
    std::copy(v.data.begin() + static_cast<size_t>(start) * inner,
              v.data.begin() + static_cast<size_t>(start + len) * inner, out.data.begin());
    Var o = push(std::move(out), needs(a));
    if (needs(o))
      bk(o, [a, start, inner, o](Tape& t) {
        auto& ga = t.ensure_grad(a);
        const auto& g = t.nodes_[o.id].grad;
        for (int i = 0; i < g.numel(); ++i) ga.data[static_cast<size_t>(start) * inner + i] += g.data[i];
      });
    return o;
  }

  Var reshape(Var a, std::vector<int> shape) {
    Tensor<T> out(std::move(shape), val(a).data);
    Var o = push(std::move(out), needs(a));
    if (needs(o))
      bk(o, [a, o](Tape& t) { t.accumulate(a, t.nodes_[o.id].grad.data.data()); });
    return o;
  }

  /// [n] -> [m,n], each row a copy.
  Var repeat_rows(Var v, int m) {
    const auto& x = val(v);
    if (x.rank() != 1) throw std::invalid_argument("repeat_rows: want vector");
    const int n = x.shape[0];
    Tensor<T> out({m, n});
    for (int i = 0; i < m; ++i)
      std::copy(x.data.begin(), x.data.end(), out.data.begin() + static_cast<size_t>(i) * n);
    Var o = push(std::move(out), needs(v));
    if (needs(o))
      bk(o, [v, m, n, o](Tape& t) {
        auto& gv = t.ensure_grad(v);
        const auto& g = t.nodes_[o.id].grad;
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) gv[j] += g.data[static_cast<size_t>(i) * n + j];
      });
    return o;
  }

  /// [m,n1],[m,n2],... -> [m, n1+n2+...]
  Var concat_cols(const std::vector<Var>& xs) {
    if (xs.empty()) throw std::invalid_argument("concat_cols: empty");
    const int m = val(xs[0]).shape[0];
    int ncols = 0;
    bool ng = false;
    for (Var x : xs) {
      const auto& s = val(x).shape;
      if (s.size() != 2 || s[0] != m) throw std::invalid_argument("concat_cols: shape mismatch");
      ncols += s[1];
      ng = ng || needs(x);
    }
    Tensor<T> out({m, ncols});
    int coff = 0;
    for (Var x : xs) {
      const auto& v = val(x);
      const int n = v.shape[1];
      for (int i = 0; i < m; ++i)
        std::copy(v.data.begin() + static_cast<size_t>(i) * n,
                  v.data.begin() + static_cast<size_t>(i + 1) * n,
                  out.data.begin() + static_cast<size_t>(i) * ncols + coff);
      coff += n;
    }
    Var o = push(std::move(out), ng);
    if (needs(o))
      bk(o, [xs, m, ncols, o](Tape& t) {
        const auto& g = t.nodes_[o.id].grad;
        int pos = 0;
        for (Var x : xs) {
          const int n = t.val(x).shape[1];
          if (t.needs(x)) {
            auto& gx = t.ensure_grad(x);
            for (int i = 0; i < m; ++i)
              for (int j = 0; j < n; ++j)
                gx.data[static_cast<size_t>(i) * n + j] +=
                    g.data[static_cast<size_t>(i) * ncols + pos + j];
          }
          pos += n;
        }
      });
    return o;
  }

  /// [c] -> [c,H,W], channel i constant.
  Var broadcast_hw(Var v, int H, int W) {
    const auto& x = val(v);
    if (x.rank() != 1) throw std::invalid_argument("broadcast_hw: want vector");
    const int c = x.shape[0];
    Tensor<T> out({c, H, W});
    for (int i = 0; i < c; ++i)
      std::fill(out.data.begin() + static_cast<size_t>(i) * H * W,
                out.data.begin() + static_cast<size_t>(i + 1) * H * W, x[i]);
    Var o = push(std::move(out), needs(v));
    if (needs(o))
      bk(o, [v, c, H, W, o](Tape& t) {
        auto& gv = t.ensure_grad(v);
        const auto& g = t.nodes_[o.id].grad;
        for (int i = 0; i < c; ++i) {
          T acc = T(0);
          const T* p = g.data.data() + static_cast<size_t>(i) * H * W;
          for (int j = 0; j < H * W; ++j) acc += p[j];
          gv[i] += acc;
        }
      });
    return o;
  }

  // ---- reductions ----

  Var sum(Var a) {
    T acc = T(0);
    for (T v : val(a).data) acc += v;
    Var o = push(Tensor<T>::scalar(acc), needs(a));
    if (needs(o))
      bk(o, [a, o](Tape& t) {
        auto& ga = t.ensure_grad(a);
        const T g = t.nodes_[o.id].grad[0];
        for (auto& v : ga.data) v += g;
      });
    return o;
  }

  Var mean(Var a) { return scale(sum(a), T(1) / T(numel(a))); }

  /// [m,n] -> [n], mean over rows.
  Var mean_rows(Var a) {
    const auto& v = val(a);
    if (v.rank() != 2) throw std::invalid_argument("mean_rows: want matrix");
    const int m = v.shape[0], n = v.shape[1];
    Tensor<T> out({n});
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) out[j] += v.data[static_cast<size_t>(i) * n + j];
    for (auto& x : out.data) x /= T(m);
    Var o = push(std::move(out), needs(a));
    if (needs(o))
      bk(o, [a, m, n, o](Tape& t) {
        auto& ga = t.ensure_grad(a);
        const auto& g = t.nodes_[o.id].grad;
        const T inv = T(1) / T(m);
        for (int i = 0; i < m; ++i)
          for (int j = 0; j < n; ++j) ga.data[static_cast<size_t>(i) * n + j] += inv * g[j];
      });
    return o;
  }

  // ---- linear algebra ----

  /// C = op(A) op(B) with optional transposes; A,B rank-2.
  Var matmul(Var a, Var b, bool ta = false, bool tb = false) {
    const auto& va = val(a);
    const auto& vb = val(b);
    if (va.rank() != 2 || vb.rank() != 2) throw std::invalid_argument("matmul: want matrices");
    const int m = ta ? va.shape[1] : va.shape[0];
    const int k = ta ? va.shape[0] : va.shape[1];
    const int k2 = tb ? vb.shape[1] : vb.shape[0];
    const int n = tb ? vb.shape[0] : vb.shape[1];
    if (k != k2)
      throw std::invalid_argument("matmul: inner dims " + shape_str(va.shape) + " x " +
                                  shape_str(vb.shape));
    Tensor<T> out({m, n});
    detail::gemm(va.data.data(), va.shape[0], va.shape[1], ta, vb.data.data(), vb.shape[0],
                 vb.shape[1], tb, out.data.data(), false);
    Var o = push(std::move(out), needs(a) || needs(b));
    if (needs(o))
      bk(o, [a, b, ta, tb, o](Tape& t) {
        const auto& g = t.nodes_[o.id].grad;   // [m,n]
        const auto& va2 = t.val(a);
        const auto& vb2 = t.val(b);
        const int gm = g.shape[0], gn = g.shape[1];
        if (t.needs(a)) {
          auto& ga = t.ensure_grad(a);
          // dA = ta ? op(B) gᵀ : g op(B)ᵀ  (op(B) = tb ? Bᵀ : B)
          if (!ta) {
            detail::gemm(g.data.data(), gm, gn, false, vb2.data.data(), vb2.shape[0], vb2.shape[1],
                         !tb, ga.data.data(), true);
          } else {
            detail::gemm(vb2.data.data(), vb2.shape[0], vb2.shape[1], tb, g.data.data(), gm, gn,
                         true, ga.data.data(), true);
          }
        }
        if (t.needs(b)) {
          auto& gb = t.ensure_grad(b);
          if (!tb) {
            detail::gemm(va2.data.data(), va2.shape[0], va2.shape[1], !ta, g.data.data(), gm, gn,
                         false, gb.data.data(), true);
          } else {
            detail::gemm(g.data.data(), gm, gn, true, va2.data.data(), va2.shape[0], va2.shape[1],
                         ta, gb.data.data(), true);
          }
        }
      });
    return o;
  }

  /// A [m,n] * x [n] -> [m]
  Var matvec(Var a, Var x) {
    Var xm = reshape(x, {numel(x), 1});
    Var y = matmul(a, xm);
    return reshape(y, {val(a).shape[0]});
  }

  /// A [m,n] + row [n] broadcast over rows.
  Var add_rowvec(Var a, Var r) {
    const auto& va = val(a);
    const auto& vr = val(r);
    if (va.rank() != 2 || vr.rank() != 1 || va.shape[1] != vr.shape[0])
      throw std::invalid_argument("add_rowvec: shape mismatch");
    const int m = va.shape[0], n = va.shape[1];
    Tensor<T> out = va;
    for (int i = 0; i < m; ++i)
      for (int j = 0; j < n; ++j) out.data[static_cast<size_t>(i) * n + j] += vr[j];
    Var o = push(std::move(out), needs(a) || needs(r));
    if (needs(o))
      bk(o, [a, r, m, n, o](Tape& t) {
        const auto& g = t.nodes_[o.id].grad;
        if (t.needs(a)) t.accumulate(a, g.data.data());
        if (t.needs(r)) {
          auto& gr = t.ensure_grad(r);
          for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) gr[j] += g.data[static_cast<size_t>(i) * n + j];
        }
      });
    return o;
  }

  // ---- convolution ----

  /// x [Cin,H,W], w [Cout,Cin,kh,kw], optional bias [Cout].
  Var conv2d(Var x, Var w, Var b, int stride, int pad) {
    const auto& vx = val(x);
    const auto& vw = val(w);
    if (vx.rank() != 3 || vw.rank() != 4) throw std::invalid_argument("conv2d: bad ranks");
    const int Cin = vx.shape[0], H = vx.shape[1], W = vx.shape[2];
    const int Cout = vw.shape[0], kh = vw.shape[2], kw = vw.shape[3];
    if (vw.shape[1] != Cin) throw std::invalid_argument("conv2d: channel mismatch");
    const int Ho = detail::conv_out(H, kh, stride, pad);
    const int Wo = detail::conv_out(W, kw, stride, pad);
    const int ck = Cin * kh * kw;
    std::vector<T> cols(static_cast<size_t>(ck) * Ho * Wo);
    detail::im2col(vx.data.data(), Cin, H, W, kh, kw, stride, pad, cols.data());
    Tensor<T> out({Cout, Ho, Wo});
    detail::gemm(vw.data.data(), Cout, ck, false, cols.data(), ck, Ho * Wo, false, out.data.data(),
                 false);
    if (b.valid()) {
      const auto& vb = val(b);
      for (int c = 0; c < Cout; ++c) {
        T* p = out.data.data() + static_cast<size_t>(c) * Ho * Wo;
        for (int i = 0; i < Ho * Wo; ++i) p[i] += vb[c];
      }
    }
    const bool ng = needs(x) || needs(w) || (b.valid() && needs(b));
    Var o = push(std::move(out), ng);
    if (needs(o))
      bk(o, [x, w, b, stride, pad, Cin, H, W, Cout, kh, kw, Ho, Wo, ck, o](Tape& t) {
        const auto& g = t.nodes_[o.id].grad;  // [Cout,Ho,Wo]
        if (t.needs(w)) {
          // dW = g_mat [Cout, HoWo] * colsᵀ ; cols recomputed to avoid caching
          std::vector<T> cols(static_cast<size_t>(ck) * Ho * Wo);
          detail::im2col(t.val(x).data.data(), Cin, H, W, kh, kw, stride, pad, cols.data());
          auto& gw = t.ensure_grad(w);
          detail::gemm(g.data.data(), Cout, Ho * Wo, false, cols.data(), ck, Ho * Wo, true,
                       gw.data.data(), true);
        }
        if (t.needs(x)) {
          std::vector<T> dcols(static_cast<size_t>(ck) * Ho * Wo);
          detail::gemm(t.val(w).data.data(), Cout, ck, true, g.data.data(), Cout, Ho * Wo, false,
                       dcols.data(), false);
          auto& gx = t.ensure_grad(x);
          detail::col2im(dcols.data(), Cin, H, W, kh, kw, stride, pad, gx.data.data());
        }
        if (b.valid() && t.needs(b)) {
          auto& gb = t.ensure_grad(b);
          for (int c = 0; c < Cout; ++c) {
            T acc = T(0);
            const T* p = g.data.data() + static_cast<size_t>(c) * Ho * Wo;
            for (int i = 0; i < Ho * Wo; ++i) acc += p[i];
            gb[c] += acc;
          }
        }
      });
    return o;
  }

  /// Transposed conv: x [Cin,Hi,Wi], w [Cin,Cout,kh,kw], out [Cout,Ho,Wo],
  /// Ho = (Hi-1)*stride + kh - 2*pad.
  Var conv_transpose2d(Var x, Var w, Var b, int stride, int pad) {
    const auto& vx = val(x);
    const auto& vw = val(w);
    if (vx.rank() != 3 || vw.rank() != 4) throw std::invalid_argument("convT: bad ranks");
    const int Cin = vx.shape[0], Hi = vx.shape[1], Wi = vx.shape[2];
    if (vw.shape[0] != Cin) throw std::invalid_argument("convT: channel mismatch");
    const int Cout = vw.shape[1], kh = vw.shape[2], kw = vw.shape[3];
    const int Ho = (Hi - 1) * stride + kh - 2 * pad;
    const int Wo = (Wi - 1) * stride + kw - 2 * pad;
    const int ck = Cout * kh * kw;
    // cols [Cout*kh*kw, Hi*Wi] = W reshaped [Cin, ck]ᵀ * x [Cin, HiWi]
    std::vector<T> cols(static_cast<size_t>(ck) * Hi * Wi);
    detail::gemm(vw.data.data(), Cin, ck, true, vx.data.data(), Cin, Hi * Wi, false, cols.data(),
                 false);
    Tensor<T> out({Cout, Ho, Wo});
    detail::col2im(cols.data(), Cout, Ho, Wo, kh, kw, stride, pad, out.data.data());
    if (b.valid()) {
      const auto& vb = val(b);
      for (int c = 0; c < Cout; ++c) {
        T* p = out.data.data() + static_cast<size_t>(c) * Ho * Wo;
        for (int i = 0; i < Ho * Wo; ++i) p[i] += vb[c];
      }
    }
    const bool ng = needs(x) || needs(w) || (b.valid() && needs(b));
    Var o = push(std::move(out), ng);
    if (needs(o))
      bk(o, [x, w, b, stride, pad, Cin, Hi, Wi, Cout, kh, kw, Ho, Wo, ck, o](Tape& t) {
        const auto& g = t.nodes_[o.id].grad;  // [Cout,Ho,Wo]
        std::vector<T> gcols(static_cast<size_t>(ck) * Hi * Wi);
        detail::im2col(g.data.data(), Cout, Ho, Wo, kh, kw, stride, pad, gcols.data());
        if (t.needs(x)) {
          // dx [Cin, HiWi] = W [Cin, ck] * gcols [ck, HiWi]
          auto& gx = t.ensure_grad(x);
          detail::gemm(t.val(w).data.data(), Cin, ck, false, gcols.data(), ck, Hi * Wi, false,
                       gx.data.data(), true);
        }
        if (t.needs(w)) {
          // dW [Cin, ck] = x [Cin, HiWi] * gcolsᵀ [HiWi, ck]
          auto& gw = t.ensure_grad(w);
          detail::gemm(t.val(x).data.data(), Cin, Hi * Wi, false, gcols.data(), ck, Hi * Wi, true,
                       gw.data.data(), true);
        }
        if (b.valid() && t.needs(b)) {
          auto& gb = t.ensure_grad(b);
          for (int c = 0; c < Cout; ++c) {
            T acc = T(0);
            const T* p = g.data.data() + static_cast<size_t>(c) * Ho * Wo;
            for (int i = 0; i < Ho * Wo; ++i) acc += p[i];
            gb[c] += acc;
          }
        }
      });
    return o;
  }

  // ---- distribution terms ----

  /// KL(N(muq, sq) || N(mup, sp)) summed over elements; stds given directly.
  Var gaussian_kl(Var muq, Var sq, Var mup, Var sp) {
    check_same(muq, sq, "gaussian_kl");
    check_same(muq, mup, "gaussian_kl");
    check_same(muq, sp, "gaussian_kl");
    const auto &mq = val(muq), &vsq = val(sq), &mp = val(mup), &vsp = val(sp);
    T acc = T(0);
    for (int i = 0; i < mq.numel(); ++i) {
      const T d = mq[i] - mp[i];
      const T r = vsq[i] / vsp[i];
      acc += std::log(vsp[i]) - std::log(vsq[i]) + (r * r + (d / vsp[i]) * (d / vsp[i])) * T(0.5) -
             T(0.5);
    }
    const bool ng = needs(muq) || needs(sq) || needs(mup) || needs(sp);
    Var o = push(Tensor<T>::scalar(acc), ng);
    if (needs(o))
      bk(o, [muq, sq, mup, sp, o](Tape& t) {
        const T g = t.nodes_[o.id].grad[0];
        const auto &mq = t.val(muq), &vsq = t.val(sq), &mp = t.val(mup), &vsp = t.val(sp);
        const int n = mq.numel();
        if (t.needs(muq)) {
          auto& gm = t.ensure_grad(muq);
          for (int i = 0; i < n; ++i) gm[i] += g * (mq[i] - mp[i]) / (vsp[i] * vsp[i]);
        }
        if (t.needs(sq)) {
          auto& gs = t.ensure_grad(sq);
          for (int i = 0; i < n; ++i) gs[i] += g * (vsq[i] / (vsp[i] * vsp[i]) - T(1) / vsq[i]);
        }
        if (t.needs(mup)) {
          auto& gm = t.ensure_grad(mup);
          for (int i = 0; i < n; ++i) gm[i] -= g * (mq[i] - mp[i]) / (vsp[i] * vsp[i]);
        }
        if (t.needs(sp)) {
          auto& gs = t.ensure_grad(sp);
          for (int i = 0; i < n; ++i) {
            const T d = mq[i] - mp[i];
            gs[i] += g * (T(1) / vsp[i] -
                          (vsq[i] * vsq[i] + d * d) / (vsp[i] * vsp[i] * vsp[i]));
          }
        }
      });
    return o;
  }

  /// Sum over elements of log N(y_i; mu_i, sigma_i); y is data, per-element std.
  Var normal_loglik(const Tensor<T>& y, Var mu, Var sigma) {
    check_same(mu, sigma, "normal_loglik");
    const auto& vm = val(mu);
    const auto& vs = val(sigma);
    if (!vm.same_shape(y)) throw std::invalid_argument("normal_loglik: y shape mismatch");
    constexpr double kLog2Pi = 1.8378770664093454836;
    T acc = T(0);
    for (int i = 0; i < y.numel(); ++i) {
      const T d = (y[i] - vm[i]) / vs[i];
      acc += T(-0.5) * (T(kLog2Pi) + d * d) - std::log(vs[i]);
    }
    Var o = push(Tensor<T>::scalar(acc), needs(mu) || needs(sigma));
    if (needs(o)) {
      auto yc = y;  // captured copy
      bk(o, [yc, mu, sigma, o](Tape& t) {
        const T g = t.nodes_[o.id].grad[0];
        const auto& vm = t.val(mu);
        const auto& vs = t.val(sigma);
        const int n = yc.numel();
        if (t.needs(mu)) {
          auto& gm = t.ensure_grad(mu);
          for (int i = 0; i < n; ++i) gm[i] += g * (yc[i] - vm[i]) / (vs[i] * vs[i]);
        }
        if (t.needs(sigma)) {
          auto& gs = t.ensure_grad(sigma);
          for (int i = 0; i < n; ++i) {
            const T d = yc[i] - vm[i];
            gs[i] += g * (d * d / (vs[i] * vs[i] * vs[i]) - T(1) / vs[i]);
          }
        }
      });
    }
    return o;
  }

  /// Same with one fixed (non-learned) std for every element.
  Var normal_loglik_fixed(const Tensor<T>& y, Var mu, T sigma) {
    const auto& vm = val(mu);
    if (!vm.same_shape(y)) throw std::invalid_argument("normal_loglik_fixed: shape");
    constexpr double kLog2Pi = 1.8378770664093454836;
    const T inv2 = T(1) / (T(2) * sigma * sigma);
    T acc = T(0);
    for (int i = 0; i < y.numel(); ++i) {
      const T d = y[i] - vm[i];
      acc += -d * d * inv2;
    }
    acc += T(y.numel()) * (T(-0.5) * T(kLog2Pi) - std::log(sigma));
    Var o = push(Tensor<T>::scalar(acc), needs(mu));
    if (needs(o)) {
      auto yc = y;
      bk(o, [yc, mu, sigma, o](Tape& t) {
        const T g = t.nodes_[o.id].grad[0];
        auto& gm = t.ensure_grad(mu);
        const auto& vm = t.val(mu);
        const T inv = T(1) / (sigma * sigma);
        for (int i = 0; i < yc.numel(); ++i) gm[i] += g * (yc[i] - vm[i]) * inv;
      });
    }
    return o;
  }

  // ---- driver ----

  /// Seeds d(root)=1 and sweeps the tape in reverse. Parameter gradients are
  /// then accumulated into their Param::grad buffers.
  void backward(Var root) {
    if (numel(root) != 1) throw std::invalid_argument("backward: root must be scalar");
    if (!nodes_[root.id].requires_grad) return;
    ensure_grad(root)[0] = T(1);
    for (int id = root.id; id >= 0; --id) {
      auto& nd = nodes_[id];
      if (nd.back && !nd.grad.data.empty()) nd.back(*this);
    }
    for (auto& [p, id] : param_hooks_) {
      const auto& g = nodes_[id].grad;
      if (g.data.empty()) continue;
      Tensor<T>* sink = nullptr;
      if (external_grads_) {
        for (auto& [ep, eg] : ext_grads_)
          if (ep == p) {
            sink = &eg;
            break;
          }
        if (!sink) {
          ext_grads_.emplace_back(p, Tensor<T>(p->value.shape));
          sink = &ext_grads_.back().second;
        }
      } else {
        if (p->grad.data.empty()) p->grad = Tensor<T>(p->value.shape);
        sink = &p->grad;
      }
      for (int i = 0; i < g.numel(); ++i) (*sink)[i] += g[i];
    }
  }

  /// Thread-local gradient accumulation: backward() fills external_grads()
  /// instead of Param::grad, so workers never write shared state.
  void set_external_grads(bool on) { external_grads_ = on; }
  std::vector<std::pair<Param<T>*, Tensor<T>>>& external_grads() { return ext_grads_; }

  bool needs(Var v) const { return nodes_[v.id].requires_grad; }

  Tensor<T>& ensure_grad(Var v) {
    auto& nd = nodes_[v.id];
    if (nd.grad.data.empty()) nd.grad = Tensor<T>(nd.val.shape);
    return nd.grad;
  }

 private:
  struct Node {
    Tensor<T> val;
    Tensor<T> grad;
    std::function<void(Tape&)> back;
    bool requires_grad = false;
  };

  Var push(Tensor<T> v, bool requires_grad) {
    nodes_.push_back(Node{std::move(v), {}, nullptr, requires_grad});
    return Var{static_cast<int32_t>(nodes_.size() - 1)};
  }

  void check_same(Var a, Var b, const char* op) const {
    if (!val(a).same_shape(val(b)))
      throw std::invalid_argument(std::string(op) + ": shape mismatch " +
                                  shape_str(val(a).shape) + " vs " + shape_str(val(b).shape));
  }

  void bk(Var v, std::function<void(Tape&)> f) { nodes_[v.id].back = std::move(f); }

  void accumulate(Var v, const T* g) {
    if (!needs(v)) return;
    auto& gv = ensure_grad(v);
    for (int i = 0; i < gv.numel(); ++i) gv[i] += g[i];
  }

  template <class F>
  Var unary(Var a, Tensor<T> out, F dfdx) {
    Var o = push(std::move(out), needs(a));
    if (needs(o))
      bk(o, [a, o, dfdx](Tape& t) {
        auto& ga = t.ensure_grad(a);
        const auto& g = t.nodes_[o.id].grad;
        const auto& x = t.val(a);
        const auto& y = t.val(o);
        for (int i = 0; i < g.numel(); ++i) ga[i] += g[i] * dfdx(x[i], y[i]);
      });
    return o;
  }

  template <class F>
  Var unary_from_out(Var a, Tensor<T> out, F dfdy) {
    return unary(a, std::move(out), dfdy);
  }

  std::deque<Node> nodes_;  // stable references across pushes
  std::vector<std::pair<Param<T>*, int32_t>> param_hooks_;
  std::vector<std::pair<Param<T>*, Tensor<T>>> ext_grads_;
  bool grad_enabled_ = true;
  bool external_grads_ = false;
};

}  // namespace snp
