#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>

#include "snp/gp_episodes.hpp"
#include "snp/snp_model.hpp"
#include "support/gradcheck.hpp"

using namespace snp;

namespace {

Snp1dConfig micro_config() {
  Snp1dConfig cfg;
  cfg.hidden = 4;
  cfg.zdim = 3;
  cfg.rdim = 4;
  cfg.sdim = 4;
  cfg.init_seed = 11;
  return cfg;
}

Episode1D tiny_episode(int T, uint64_t seed, int n_ctx = 3, int n_tgt = 4) {
  Rng rng(seed);
  Episode1D ep;
  ep.task = 'a';
  ep.T = T;
  ep.seed = seed;
  ep.steps.resize(T);
  for (auto& st : ep.steps) {
    const int total = n_ctx + n_tgt;
    for (int i = 0; i < total; ++i) {
      st.x.push_back(static_cast<float>(rng.uniform(-2, 2)));
      st.y.push_back(static_cast<float>(rng.normal()));
      st.ctx_mask.push_back(i < n_ctx);
      st.tgt_mask.push_back(i >= n_ctx);
    }
  }
  return ep;
}

}  // namespace

TEST_CASE("encode_set: empty, duplicate, permutation") {
  SnpModel<double> m(micro_config());
  Tape<double> t;
  const auto empty = m.encode_set(t, {});
  CHECK(empty.count == 0);
  for (double v : t.val(empty.r).data) CHECK(v == 0.0);
  for (double v : t.val(empty.s).data) CHECK(v == 0.0);

  const auto one = m.encode_set(t, {{0.5, -0.2}});
  const auto dup = m.encode_set(t, {{0.5, -0.2}, {0.5, -0.2}});
  CHECK(t.val(one.r).data == t.val(dup.r).data);
  CHECK(t.val(one.s).data == t.val(dup.s).data);

  std::vector<std::pair<double, double>> pts;
  Rng rng(3);
  for (int i = 0; i < 10; ++i) pts.emplace_back(rng.uniform(-2, 2), rng.normal());
  auto shuffled = pts;
  rng.shuffle(shuffled.begin(), shuffled.end());
  const auto a = m.encode_set(t, pts);
  const auto b = m.encode_set(t, shuffled);
  CHECK(t.val(a.r).data == t.val(b.r).data);  // bitwise
  CHECK(t.val(a.s).data == t.val(b.s).data);

  CHECK_THROWS_AS(m.encode_set(t, {{std::nan(""), 0.0}}), std::runtime_error);
}

TEST_CASE("prior_step and posterior_step are pure and set-invariant") {
  SnpModel<double> m(micro_config());
  Tape<double> t;
  Var h0 = t.constant(Tensor<double>::vec({0.1, -0.2, 0.3, 0.0}));
  Var c0 = t.constant(Tensor<double>::vec({0.0, 0.1, -0.1, 0.2}));
  Var z0 = t.constant(Tensor<double>::vec({0.5, -0.5, 0.25}));
  const auto ctx = m.encode_set(t, {{0.1, 0.2}, {-1.0, 0.7}});
  const auto p1 = m.prior_step(t, h0, c0, z0, ctx);
  const auto p2 = m.prior_step(t, h0, c0, z0, ctx);
  CHECK(t.val(p1.h).data == t.val(p2.h).data);
  CHECK(t.val(p1.prior.mu).data == t.val(p2.prior.mu).data);
  CHECK(t.val(p1.prior.sigma).data == t.val(p2.prior.sigma).data);

  // Posterior with empty targets (full == ctx) equals the prior: shared head.
  const auto post = m.posterior_step(t, p1.h, ctx);
  CHECK(t.val(post.mu).data == t.val(p1.prior.mu).data);
  CHECK(t.val(post.sigma).data == t.val(p1.prior.sigma).data);
}

TEST_CASE("decode: std floor and log-density at the mean") {
  SnpModel<double> m(micro_config());
  Tape<double> t;
  Var z = t.constant(Tensor<double>::vec({0.3, -0.4, 0.9}));
  Var s = t.constant(Tensor<double>::vec({0.1, 0.1, -0.2, 0.5}));
  const auto pred = m.decode(t, 0.7, z, s);
  const double sigma = t.val(pred.sigma)[0];
  CHECK(sigma >= kDecoderStdFloor);
  // log N(mu; mu, sigma) = -log(sigma * sqrt(2*pi))
  Tensor<double> y({1}, {t.val(pred.mu)[0]});
  const double logp = normal_logpdf(y, t.val(pred.mu), t.val(pred.sigma));
  CHECK(logp == doctest::Approx(-std::log(sigma * std::sqrt(2 * 3.14159265358979323846)))
                    .epsilon(1e-12));
}

TEST_CASE("gaussian_kl closed form vs Monte Carlo") {
  Rng rng(17);
  for (int trial = 0; trial < 5; ++trial) {
    const double muq = rng.uniform(-1, 1), sq = rng.uniform(0.5, 1.25);
    const double mup = rng.uniform(-1, 1), sp = rng.uniform(0.5, 1.25);
    Tape<double> t;
    const double closed = t.val(t.gaussian_kl(
        t.constant(Tensor<double>::vec({muq})), t.constant(Tensor<double>::vec({sq})),
        t.constant(Tensor<double>::vec({mup})), t.constant(Tensor<double>::vec({sp}))))[0];
    double acc = 0;
    const int n = 1000000;
    for (int i = 0; i < n; ++i) {
      const double z = muq + sq * rng.normal();
      const double lq = -0.5 * ((z - muq) / sq) * ((z - muq) / sq) - std::log(sq);
      const double lp = -0.5 * ((z - mup) / sp) * ((z - mup) / sp) - std::log(sp);
      acc += lq - lp;
    }
    CHECK(std::fabs(closed - acc / n) < 0.01);
    CHECK(closed >= 0.0);
  }
}

TEST_CASE("elbo_snp: all-empty targets make the ELBO -sum KL <= 0") {
  SnpModel<double> m(micro_config());
  Episode1D ep = tiny_episode(4, 5, 3, 0);  // no targets anywhere
  Tape<double> t;
  ObjectiveReport rep;
  Var e = m.elbo_snp(t, ep, Rng(7), &rep);
  for (double r : rep.recon) CHECK(r == 0.0);
  double kl_sum = 0;
  for (double k : rep.kl) {
    CHECK(k >= 0.0);
    kl_sum += k;
  }
  CHECK(t.val(e)[0] == doctest::Approx(-kl_sum).epsilon(1e-12));
  CHECK(t.val(e)[0] <= 0.0);
}

TEST_CASE("elbo_pd with empty dropout set reproduces elbo_snp bitwise") {
  SnpModel<double> m(micro_config());
  const Episode1D ep = tiny_episode(6, 21);
  Tape<double> t1, t2;
  ObjectiveReport r1, r2;
  Var a = m.elbo_snp(t1, ep, Rng(99), &r1);
  Var b = m.elbo_pd(t2, ep, std::vector<uint8_t>(ep.T, 0), Rng(99), &r2);
  CHECK(t1.val(a)[0] == t2.val(b)[0]);  // bitwise
  CHECK(r1.recon == r2.recon);
  CHECK(r1.kl == r2.kl);
  CHECK(r1.l_snp == r2.l_pd);
}

TEST_CASE("elbo_pd with full dropout set is exactly zero") {
  SnpModel<double> m(micro_config());
  const Episode1D ep = tiny_episode(5, 33);
  Tape<double> t;
  ObjectiveReport rep;
  Var e = m.elbo_pd(t, ep, std::vector<uint8_t>(ep.T, 1), Rng(4), &rep);
  CHECK(t.val(e)[0] == 0.0);
  CHECK(rep.l_pd == 0.0);
}

TEST_CASE("objective report combines exactly") {
  ObjectiveReport rep;
  rep.l_snp = -12.5;
  rep.l_pd = -3.25;
  rep.alpha = 1.0;
  rep.finalize();
  CHECK(rep.combined == rep.l_snp + rep.alpha * rep.l_pd);
}

TEST_CASE("elbo permutation invariance is bitwise") {
  SnpModel<double> m(micro_config());
  Episode1D ep = tiny_episode(3, 55);
  Episode1D shuffled = ep;
  Rng rng(1);
  for (auto& st : shuffled.steps) {
    std::vector<int> idx(st.x.size());
    for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
    rng.shuffle(idx.begin(), idx.end());
    Step1D ns;
    for (int i : idx) {
      ns.x.push_back(st.x[i]);
      ns.y.push_back(st.y[i]);
      ns.ctx_mask.push_back(st.ctx_mask[i]);
      ns.tgt_mask.push_back(st.tgt_mask[i]);
    }
    st = ns;
  }
  Tape<double> t1, t2;
  Var a = m.elbo_snp(t1, ep, Rng(5));
  Var b = m.elbo_snp(t2, shuffled, Rng(5));
  CHECK(t1.val(a)[0] == t2.val(b)[0]);
}

TEST_CASE("prior locality: future contexts and all targets never move prior params") {
  SnpModel<double> m(micro_config());
  Episode1D ep = tiny_episode(5, 77);
  Episode1D edited = ep;
  // Edit D everywhere and C at steps > 3.
  for (int s = 0; s < edited.T; ++s)
    for (size_t i = 0; i < edited.steps[s].x.size(); ++i)
      if (edited.steps[s].tgt_mask[i] || s > 2) edited.steps[s].y[i] += 7.5f;

  auto prior_trace = [&](const Episode1D& e) {
    Tape<double> t;
    t.set_grad_enabled(false);
    std::vector<double> trace;
    Var h, c, z;
    ObjectiveReport rep;
    // Roll the posterior chain but record prior params for the first 3 steps.
    // Reuse the model pieces directly.
    h = t.constant(Tensor<double>(m.params().find("trans.h0")->value));
    c = t.constant(Tensor<double>(m.params().find("trans.c0")->value));
    z = t.constant(Tensor<double>({m.config().zdim}));
    Rng rng(31);
    for (int s = 0; s < 3; ++s) {
      const auto enc_ctx = m.encode_set(t, SnpModel<double>::points(e.steps[s], true, false));
      const auto enc_full = m.encode_set(t, SnpModel<double>::points(e.steps[s], true, true));
      const auto pr = m.prior_step(t, h, c, z, enc_ctx);
      h = pr.h;
      c = pr.c;
      for (double v : t.val(pr.prior.mu).data) trace.push_back(v);
      for (double v : t.val(pr.prior.sigma).data) trace.push_back(v);
      const auto post = m.posterior_step(t, pr.h, enc_full);
      // Advance z along the PRIOR chain so the trace only depends on contexts.
      Tensor<double> eps({m.config().zdim});
      for (auto& v : eps.data) v = rng.normal();
      z = t.add(pr.prior.mu, t.mul(pr.prior.sigma, t.constant(std::move(eps))));
      (void)post;
    }
    return trace;
  };
  CHECK(prior_trace(ep) == prior_trace(edited));
}

TEST_CASE("reparameterization: std at the floor gives z = mu + floor*eps") {
  // Force raw std input to -inf-ish so sigma == 0.1 exactly.
  Tape<double> t;
  Var raw = t.constant(Tensor<double>::vec({-1e9, -1e9}));
  Var sigma = latent_std(t, raw);
  CHECK(t.val(sigma)[0] == doctest::Approx(0.1).epsilon(1e-15));
  Var mu = t.constant(Tensor<double>::vec({0.7, -0.3}));
  Tensor<double> eps({2}, {1.25, -0.5});
  Var z = t.add(mu, t.mul(sigma, t.constant(eps)));
  CHECK(t.val(z)[0] == doctest::Approx(0.7 + 0.1 * 1.25).epsilon(1e-15));
  CHECK(t.val(z)[1] == doctest::Approx(-0.3 + 0.1 * -0.5).epsilon(1e-15));
}

TEST_CASE("gradient check: elbo_snp on a micro model") {
  SnpModel<double> m(micro_config());
  const Episode1D ep = tiny_episode(3, 13, 2, 3);
  const double err = testsupport::gradcheck_rel_error(
      m.params(), [&](Tape<double>& t) { return m.elbo_snp(t, ep, Rng(42)); });
  CHECK(err < 1e-4);
}

TEST_CASE("gradient check: elbo_pd on a micro model") {
  SnpModel<double> m(micro_config());
  const Episode1D ep = tiny_episode(4, 14, 2, 3);
  const std::vector<uint8_t> mask = {1, 0, 1, 0};
  const double err = testsupport::gradcheck_rel_error(
      m.params(), [&](Tape<double>& t) { return m.elbo_pd(t, ep, mask, Rng(52)); });
  CHECK(err < 1e-4);
}

TEST_CASE("T=1 SNP reduces to an NP with the transition as prior") {
  SnpModel<double> m(micro_config());
  Episode1D ep = tiny_episode(1, 61, 0, 4);  // empty C_1, targets only
  Tape<double> t;
  ObjectiveReport rep;
  Rng rng(9);
  Var e = m.elbo_snp(t, ep, rng, &rep);

  // Independent reassembly of the NP-form ELBO: recon - KL(post || prior),
  // with the same epsilon stream.
  Tape<double> t2;
  t2.set_grad_enabled(false);
  Var h0 = t2.constant(Tensor<double>(m.params().find("trans.h0")->value));
  Var c0 = t2.constant(Tensor<double>(m.params().find("trans.c0")->value));
  Var z0 = t2.constant(Tensor<double>({m.config().zdim}));
  const auto enc_ctx = m.encode_set(t2, {});
  const auto enc_full = m.encode_set(t2, SnpModel<double>::points(ep.steps[0], true, true));
  const auto pr = m.prior_step(t2, h0, c0, z0, enc_ctx);
  const auto post = m.posterior_step(t2, pr.h, enc_full);
  Rng rng2(9);
  Tensor<double> eps({m.config().zdim});
  for (auto& v : eps.data) v = rng2.normal();
  Var z = t2.add(post.mu, t2.mul(post.sigma, t2.constant(eps)));
  auto pts = SnpModel<double>::points(ep.steps[0], false, true);
  std::sort(pts.begin(), pts.end());
  std::vector<double> xs;
  Tensor<double> ys({static_cast<int>(pts.size())});
  for (size_t i = 0; i < pts.size(); ++i) {
    xs.push_back(pts[i].first);
    ys[static_cast<int>(i)] = pts[i].second;
  }
  const auto pred = m.decode_rows(t2, xs, z, enc_ctx.s);
  const double recon = normal_logpdf(ys, t2.val(pred.mu), t2.val(pred.sigma));
  Var klv = t2.gaussian_kl(post.mu, post.sigma, pr.prior.mu, pr.prior.sigma);
  const double np_elbo = recon - t2.val(klv)[0];
  CHECK(t.val(e)[0] == doctest::Approx(np_elbo).epsilon(1e-12));
}

TEST_CASE("np baseline: time features and determinism") {
  CHECK(np_time_feature(0, 20) == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(np_time_feature(20, 20) == doctest::Approx(0.75).epsilon(1e-15));
  CHECK(np_time_feature(10, 20) == doctest::Approx(0.5).epsilon(1e-15));

  NpModel<double> np(micro_config());
  const Episode1D ep = tiny_episode(4, 23);
  Tape<double> t1, t2;
  ObjectiveReport r1, r2;
  Var a = np.elbo(t1, ep, Rng(3), &r1);
  Var b = np.elbo(t2, ep, Rng(3), &r2);
  CHECK(t1.val(a)[0] == t2.val(b)[0]);
  for (double k : r1.kl) CHECK(k >= 0.0);
}

TEST_CASE("np baseline gradient check") {
  Snp1dConfig cfg = micro_config();
  NpModel<double> np(cfg);
  const Episode1D ep = tiny_episode(3, 29, 2, 2);
  const double err = testsupport::gradcheck_rel_error(
      np.params(), [&](Tape<double>& t) { return np.elbo(t, ep, Rng(8)); });
  CHECK(err < 1e-4);
}

TEST_CASE("importance_nll helper: log-space safety and degenerate cases") {
  // 600-nat spread must not overflow.
  std::vector<double> w = {-300.0, 300.0};
  size_t i = 0;
  const double nll = importance_nll(2, [&]() { return w[i++]; });
  CHECK(std::isfinite(nll));
  CHECK(nll == doctest::Approx(-(300.0 - std::log(2.0))).epsilon(1e-9));
  // All -inf weights -> +inf, not a crash.
  const double inf_nll = importance_nll(3, [&]() { return -std::numeric_limits<double>::infinity(); });
  CHECK(std::isinf(inf_nll));
  CHECK(inf_nll > 0);
}

TEST_CASE("target_nll: empty-target steps are NaN, curve has length T") {
  SnpModel<double> m(micro_config());
  Episode1D ep = tiny_episode(4, 71, 2, 3);
  // Remove targets at step 2.
  for (size_t i = 0; i < ep.steps[1].x.size(); ++i)
    if (ep.steps[1].tgt_mask[i]) {
      ep.steps[1].tgt_mask[i] = 0;
      ep.steps[1].ctx_mask[i] = 1;
    }
  const auto curve = m.target_nll(ep, 3, Rng(2));
  CHECK(curve.size() == 4);
  CHECK(std::isnan(curve[1]));
  CHECK(std::isfinite(curve[0]));
  CHECK(std::isfinite(curve[3]));
}
