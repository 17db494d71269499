#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <functional>
#include <vector>

#include "snp/nn.hpp"
#include "snp/rng.hpp"
#include "snp/tape.hpp"

using namespace snp;

namespace {

// Central-difference check of d(scalar f)/d(params) for every parameter in ps.
// Returns the worst relative error across all coordinates.
double gradcheck(ParamStore<double>& ps, const std::function<Var(Tape<double>&)>& f,
                 double h = 1e-5) {
  ps.zero_grads();
  {
    Tape<double> t;
    Var y = f(t);
    t.backward(y);
  }
  double worst = 0.0;
  for (auto& p : ps) {
    for (int i = 0; i < p.value.numel(); ++i) {
      const double keep = p.value[i];
      p.value[i] = keep + h;
      double yp;
      {
        Tape<double> t;
        yp = t.val(f(t))[0];
      }
      p.value[i] = keep - h;
      double ym;
      {
        Tape<double> t;
        ym = t.val(f(t))[0];
      }
      p.value[i] = keep;
      const double fd = (yp - ym) / (2 * h);
      const double an = p.grad[i];
      const double denom = std::max({std::fabs(fd), std::fabs(an), 1e-8});
      worst = std::max(worst, std::fabs(fd - an) / denom);
    }
  }
  return worst;
}

Tensor<double> randn(std::vector<int> shape, Rng& rng, double std = 1.0) {
  Tensor<double> t(std::move(shape));
  for (auto& v : t.data) v = rng.normal(0.0, std);
  return t;
}

}  // namespace

TEST_CASE("elementwise ops match central differences") {
  Rng rng(7);
  ParamStore<double> ps;
  auto& a = ps.add("a", {4, 3});
  auto& b = ps.add("b", {4, 3});
  a.value = randn({4, 3}, rng);
  b.value = randn({4, 3}, rng);
  for (auto& v : b.value.data) v = std::fabs(v) + 0.5;  // keep log/sqrt-safe

  auto run = [&](auto make) {
    CHECK(gradcheck(ps, make) < 1e-6);
    ps.zero_grads();
  };
  run([&](Tape<double>& t) { return t.sum(t.mul(t.param(a), t.param(b))); });
  run([&](Tape<double>& t) { return t.sum(t.sub(t.param(a), t.param(b))); });
  run([&](Tape<double>& t) { return t.sum(t.add(t.square(t.param(a)), t.param(b))); });
  run([&](Tape<double>& t) { return t.sum(t.sigmoid(t.param(a))); });
  run([&](Tape<double>& t) { return t.sum(t.tanh_(t.param(a))); });
  run([&](Tape<double>& t) { return t.sum(t.softplus(t.param(a))); });
  run([&](Tape<double>& t) { return t.sum(t.exp_(t.scale(t.param(a), 0.3))); });
  run([&](Tape<double>& t) { return t.sum(t.log_(t.param(b))); });
  run([&](Tape<double>& t) { return t.mean(t.add_scalar(t.param(a), 1.5)); });
}

TEST_CASE("relu gradient away from the kink") {
  ParamStore<double> ps;
  auto& a = ps.add("a", {5});
  a.value = Tensor<double>::vec({-1.0, -0.3, 0.4, 1.2, 2.0});
  CHECK(gradcheck(ps, [&](Tape<double>& t) { return t.sum(t.relu(t.param(a))); }) < 1e-6);
}

TEST_CASE("matmul with all transpose combinations") {
  Rng rng(11);
  for (bool ta : {false, true}) {
    for (bool tb : {false, true}) {
      ParamStore<double> ps;
      auto& A = ps.add("A", ta ? std::vector<int>{4, 3} : std::vector<int>{3, 4});
      auto& B = ps.add("B", tb ? std::vector<int>{5, 4} : std::vector<int>{4, 5});
      A.value = randn(A.value.shape, rng);
      B.value = randn(B.value.shape, rng);
      const double err = gradcheck(
          ps, [&](Tape<double>& t) { return t.sum(t.matmul(t.param(A), t.param(B), ta, tb)); });
      CHECK_MESSAGE(err < 1e-6, "ta=", ta, " tb=", tb);
    }
  }
}

TEST_CASE("structure ops: concat, slice, repeat, broadcast, mean_rows") {
  Rng rng(3);
  ParamStore<double> ps;
  auto& a = ps.add("a", {3});
  auto& b = ps.add("b", {2});
  auto& m = ps.add("m", {4, 3});
  a.value = randn({3}, rng);
  b.value = randn({2}, rng);
  m.value = randn({4, 3}, rng);

  CHECK(gradcheck(ps, [&](Tape<double>& t) {
          Var cat = t.concat0(t.param(a), t.param(b));
          return t.sum(t.square(t.slice0(cat, 1, 3)));
        }) < 1e-6);
  ps.zero_grads();
  CHECK(gradcheck(ps, [&](Tape<double>& t) {
          Var r = t.repeat_rows(t.param(a), 5);
          return t.sum(t.square(r));
        }) < 1e-6);
  ps.zero_grads();
  CHECK(gradcheck(ps, [&](Tape<double>& t) {
          Var bc = t.broadcast_hw(t.param(a), 4, 5);
          return t.sum(t.square(bc));
        }) < 1e-6);
  ps.zero_grads();
  CHECK(gradcheck(ps, [&](Tape<double>& t) {
          return t.sum(t.square(t.mean_rows(t.param(m))));
        }) < 1e-6);
  ps.zero_grads();
  CHECK(gradcheck(ps, [&](Tape<double>& t) {
          Var c = t.concat_cols({t.param(m), t.repeat_rows(t.param(a), 4)});
          return t.sum(t.square(c));
        }) < 1e-6);
}

TEST_CASE("conv2d and conv_transpose2d gradients") {
  Rng rng(19);
  for (int stride : {1, 2}) {
    for (int pad : {0, 1}) {
      ParamStore<double> ps;
      auto& x = ps.add("x", {2, 6, 6});
      auto& w = ps.add("w", {3, 2, 3, 3});
      auto& b = ps.add("b", {3});
      x.value = randn({2, 6, 6}, rng);
      w.value = randn({3, 2, 3, 3}, rng, 0.4);
      b.value = randn({3}, rng, 0.2);
      const double err = gradcheck(ps, [&](Tape<double>& t) {
        return t.sum(t.square(t.conv2d(t.param(x), t.param(w), t.param(b), stride, pad)));
      });
      CHECK_MESSAGE(err < 1e-6, "conv stride=", stride, " pad=", pad);
    }
  }
  for (int stride : {1, 2}) {
    ParamStore<double> ps;
    auto& x = ps.add("x", {3, 4, 4});
    auto& w = ps.add("w", {3, 2, 2, 2});
    auto& b = ps.add("b", {2});
    x.value = randn({3, 4, 4}, rng);
    w.value = randn({3, 2, 2, 2}, rng, 0.4);
    b.value = randn({2}, rng, 0.2);
    const double err = gradcheck(ps, [&](Tape<double>& t) {
      return t.sum(t.square(t.conv_transpose2d(t.param(x), t.param(w), t.param(b), stride, 0)));
    });
    CHECK_MESSAGE(err < 1e-6, "convT stride=", stride);
  }
}

TEST_CASE("conv_transpose2d inverts conv2d shape arithmetic") {
  Rng rng(23);
  Tape<double> t;
  Var x = t.constant(randn({4, 8, 8}, rng));
  Tensor<double> w = randn({4, 2, 2, 2}, rng);
  Var y = t.conv_transpose2d(x, t.constant(w), Var{}, 2, 0);
  CHECK(t.val(y).shape == std::vector<int>{2, 16, 16});
}

TEST_CASE("distribution ops") {
  Rng rng(31);
  ParamStore<double> ps;
  auto& muq = ps.add("muq", {6});
  auto& rq = ps.add("rq", {6});
  auto& mup = ps.add("mup", {6});
  auto& rp = ps.add("rp", {6});
  muq.value = randn({6}, rng);
  rq.value = randn({6}, rng);
  mup.value = randn({6}, rng);
  rp.value = randn({6}, rng);

  CHECK(gradcheck(ps, [&](Tape<double>& t) {
          Var sq = latent_std(t, t.param(rq));
          Var sp = latent_std(t, t.param(rp));
          return t.gaussian_kl(t.param(muq), sq, t.param(mup), sp);
        }) < 1e-6);
  ps.zero_grads();

  Tensor<double> y = randn({6}, rng);
  CHECK(gradcheck(ps, [&](Tape<double>& t) {
          Var sig = decoder_std(t, t.param(rq));
          return t.normal_loglik(y, t.param(muq), sig);
        }) < 1e-6);
  ps.zero_grads();
  CHECK(gradcheck(ps, [&](Tape<double>& t) {
          return t.normal_loglik_fixed(y, t.param(muq), std::sqrt(2.0));
        }) < 1e-6);
}

TEST_CASE("gaussian_kl closed form values") {
  Tape<double> t;
  // KL(N(1,1) || N(0,1)) = 0.5
  Var kl1 = t.gaussian_kl(t.constant(Tensor<double>::vec({1.0})),
                          t.constant(Tensor<double>::vec({1.0})),
                          t.constant(Tensor<double>::vec({0.0})),
                          t.constant(Tensor<double>::vec({1.0})));
  CHECK(t.val(kl1)[0] == doctest::Approx(0.5).epsilon(1e-12));
  // KL(N(0,2) || N(0,1)) = 1.5 - ln 2
  Var kl2 = t.gaussian_kl(t.constant(Tensor<double>::vec({0.0})),
                          t.constant(Tensor<double>::vec({2.0})),
                          t.constant(Tensor<double>::vec({0.0})),
                          t.constant(Tensor<double>::vec({1.0})));
  CHECK(t.val(kl2)[0] == doctest::Approx(1.5 - std::log(2.0)).epsilon(1e-12));
  // KL(q || q) = 0
  Var kl3 = t.gaussian_kl(t.constant(Tensor<double>::vec({0.3})),
                          t.constant(Tensor<double>::vec({0.7})),
                          t.constant(Tensor<double>::vec({0.3})),
                          t.constant(Tensor<double>::vec({0.7})));
  CHECK(t.val(kl3)[0] == doctest::Approx(0.0).epsilon(1e-15));
}

TEST_CASE("lstm and convlstm cells match central differences") {
  Rng rng(41);
  {
    ParamStore<double> ps;
    LstmCell<double> cell(ps, "lstm", 3, 4, rng);
    auto& x = ps.add("x", {3});
    auto& h = ps.add("h", {4});
    auto& c = ps.add("c", {4});
    x.value = randn({3}, rng);
    h.value = randn({4}, rng, 0.5);
    c.value = randn({4}, rng, 0.5);
    CHECK(gradcheck(ps, [&](Tape<double>& t) {
            auto [h2, c2] = cell.step(t, t.param(x), t.param(h), t.param(c));
            return t.sum(t.add(t.square(h2), t.square(c2)));
          }) < 1e-6);
  }
  {
    ParamStore<double> ps;
    ConvLstmCell<double> cell(ps, "clstm", 2, 3, rng);
    auto& x = ps.add("x", {2, 5, 5});
    auto& h = ps.add("h", {3, 5, 5});
    auto& c = ps.add("c", {3, 5, 5});
    x.value = randn({2, 5, 5}, rng);
    h.value = randn({3, 5, 5}, rng, 0.5);
    c.value = randn({3, 5, 5}, rng, 0.5);
    CHECK(gradcheck(ps, [&](Tape<double>& t) {
            auto [h2, c2] = cell.step(t, t.param(x), t.param(h), t.param(c));
            return t.sum(t.add(t.square(h2), t.square(c2)));
          }) < 1e-6);
  }
}

TEST_CASE("mlp row path equals vector path") {
  Rng rng(5);
  ParamStore<double> ps;
  Mlp<double> mlp(ps, "mlp", {2, 8, 8, 3}, rng);
  Tensor<double> pts = randn({4, 2}, rng);
  Tape<double> t;
  Var rows = mlp.apply_rows(t, t.constant(pts));
  for (int i = 0; i < 4; ++i) {
    Tensor<double> p({2}, {pts.data[2 * i], pts.data[2 * i + 1]});
    Var one = mlp.apply(t, t.constant(p));
    for (int j = 0; j < 3; ++j)
      CHECK(t.val(rows).data[3 * i + j] == doctest::Approx(t.val(one)[j]).epsilon(1e-12));
  }
}

TEST_CASE("rng normal moments and determinism") {
  Rng a(123), b(123);
  for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
  Rng r(99);
  double s = 0, s2 = 0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double x = r.normal();
    s += x;
    s2 += x * x;
  }
  CHECK(std::fabs(s / n) < 0.01);
  CHECK(std::fabs(s2 / n - 1.0) < 0.02);
}
