#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "snp/episode.hpp"
#include "snp/nn.hpp"
#include "snp/optim.hpp"
#include "snp/rng.hpp"
#include "snp/tape.hpp"

namespace snp {

/// Per-step breakdown of an objective evaluation. `combined` always equals
/// l_snp + alpha * l_pd.
struct ObjectiveReport {
  std::vector<double> recon;     // expected log-likelihood per step
  std::vector<double> kl;        // KL per step
  std::vector<uint8_t> dropped;  // 1 = step sampled from the prior (in T-set)
  double l_snp = 0.0;
  double l_pd = 0.0;
  double alpha = 0.0;
  double combined = 0.0;

  void finalize() { combined = l_snp + alpha * l_pd; }
};

struct GaussianVar {
  Var mu, sigma;
};

struct StepEncodingVar {
  Var r, s;  // latent-path and deterministic-path encodings
  int count = 0;
};

/// Gaussian log-density summed over dimensions, on raw tensors.
template <class T>
double normal_logpdf(const Tensor<T>& x, const Tensor<T>& mu, const Tensor<T>& sigma) {
  constexpr double kLog2Pi = 1.8378770664093454836;
  double acc = 0.0;
  for (int i = 0; i < x.numel(); ++i) {
    const double d = (static_cast<double>(x[i]) - mu[i]) / sigma[i];
    acc += -0.5 * (kLog2Pi + d * d) - std::log(static_cast<double>(sigma[i]));
  }
  return acc;
}

inline double logsumexp(const std::vector<double>& v) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double x : v) mx = std::max(mx, x);
  if (!std::isfinite(mx)) return mx;  // all -inf
  double acc = 0.0;
  for (double x : v) acc += std::exp(x - mx);
  return mx + std::log(acc);
}

/// Normalized time feature for the NP baseline query augmentation.
inline double np_time_feature(double t, double T) { return 0.25 + 0.5 * (t / T); }

struct Snp1dConfig {
  int hidden = 128;      // LSTM state size
  int zdim = 128;        // latent size
  int rdim = 128;        // latent-path encoding size
  int sdim = 128;        // deterministic-path encoding size
  uint64_t init_seed = 1;
};

namespace detail1d {

/// Canonical point order: sort by (x..., y) so that set encodings and
/// likelihood sums are bitwise permutation-invariant.
template <class T>
Tensor<T> sorted_rows(std::vector<std::vector<T>> rows, int width) {
  std::sort(rows.begin(), rows.end());
  Tensor<T> out({static_cast<int>(rows.size()), width});
  for (size_t i = 0; i < rows.size(); ++i)
    std::copy(rows[i].begin(), rows[i].end(), out.data.begin() + i * width);
  return out;
}

}  // namespace detail1d

/// Sequential Neural Process for 1D regression: per-step set encoders, an
/// LSTM state transition consuming [z_{t-1}, r_{C_t}], a shared
/// statistics head for the latent prior/posterior, and a Gaussian decoder.
template <class T>
class SnpModel {
 public:
  explicit SnpModel(const Snp1dConfig& cfg) : cfg_(cfg) {
    Rng rng(cfg.init_seed);
    const int h = cfg.hidden;
    det_enc_ = Mlp<T>(ps_, "det_enc", {2, h, h, h, h, h, cfg.sdim}, rng);
    lat_enc_ = Mlp<T>(ps_, "lat_enc", {2, h, h, cfg.rdim}, rng);
    stats_trunk_ = Dense<T>(ps_, "stats.trunk", h + cfg.rdim, h, rng);
    stats_mu_ = Dense<T>(ps_, "stats.mu", h, cfg.zdim, rng);
    stats_raw_ = Dense<T>(ps_, "stats.raw", h, cfg.zdim, rng);
    lstm_ = LstmCell<T>(ps_, "trans", cfg.zdim + cfg.rdim, h, rng);
    h0_ = &ps_.add("trans.h0", {h});
    c0_ = &ps_.add("trans.c0", {h});
    dec_trunk_ = Mlp<T>(ps_, "dec.trunk", {1 + cfg.zdim + cfg.sdim, h, h, h}, rng, true);
    dec_mu_ = Dense<T>(ps_, "dec.mu", h, 1, rng);
    dec_raw_ = Dense<T>(ps_, "dec.raw", h, 1, rng);
  }

  ParamStore<T>& params() { return ps_; }
  const Snp1dConfig& config() const { return cfg_; }

  /// Order-invariant set encoding; empty sets give the designated zero
  /// encoding with count 0.
  StepEncodingVar encode_set(Tape<T>& t, const std::vector<std::pair<double, double>>& pts) const {
    StepEncodingVar enc;
    enc.count = static_cast<int>(pts.size());
    if (pts.empty()) {
      enc.r = t.constant(Tensor<T>({cfg_.rdim}));
      enc.s = t.constant(Tensor<T>({cfg_.sdim}));
      return enc;
    }
    std::vector<std::vector<T>> rows;
    rows.reserve(pts.size());
    for (const auto& [x, y] : pts) {
      if (!std::isfinite(x) || !std::isfinite(y))
        throw std::runtime_error("encode_set: non-finite input point");
      rows.push_back({static_cast<T>(x), static_cast<T>(y)});
    }
    Var m = t.constant(detail1d::sorted_rows(std::move(rows), 2));
    enc.s = t.mean_rows(det_enc_.apply_rows(t, m));
    enc.r = t.mean_rows(lat_enc_.apply_rows(t, m));
    return enc;
  }

  /// One transition step: h_t from (h_prev, z_prev, r_{C_t}); prior statistics
  /// from the shared head on [h_t, r_{C_t}].
  struct PriorStep {
    Var h, c;
    GaussianVar prior;
  };
  PriorStep prior_step(Tape<T>& t, Var h_prev, Var c_prev, Var z_prev,
                       const StepEncodingVar& ctx) const {
    auto [h, c] = lstm_.step(t, t.concat0(z_prev, ctx.r), h_prev, c_prev);
    return {h, c, latent_stats(t, h, ctx.r)};
  }

  /// Posterior statistics from the same head on [h_t, r_{C_t ∪ D_t}]; for an
  /// empty target set this coincides with the prior by construction.
  GaussianVar posterior_step(Tape<T>& t, Var h, const StepEncodingVar& full) const {
    return latent_stats(t, h, full.r);
  }

  /// Predictive Normal for queries (rows of x) given latent and deterministic
  /// encodings.
  GaussianVar decode_rows(Tape<T>& t, const std::vector<T>& xs, Var z, Var s) const {
    const int m = static_cast<int>(xs.size());
    Tensor<T> xm({m, 1}, xs);
    Var in = t.concat_cols({t.constant(xm), t.repeat_rows(z, m), t.repeat_rows(s, m)});
    Var hid = dec_trunk_.apply_rows(t, in);
    Var mu = t.reshape(dec_mu_.apply_rows(t, hid), {m});
    Var sigma = decoder_std(t, t.reshape(dec_raw_.apply_rows(t, hid), {m}));
    return {mu, sigma};
  }

  GaussianVar decode(Tape<T>& t, double x, Var z, Var s) const {
    return decode_rows(t, {static_cast<T>(x)}, z, s);
  }

  /// SNP ELBO (one reparameterized sample per step). Returns the scalar to
  /// maximize; per-step terms in `report`.
  Var elbo_snp(Tape<T>& t, const Episode1D& ep, Rng rng, ObjectiveReport* report = nullptr) const {
    return chain(t, ep, std::vector<uint8_t>(ep.T, 0), rng, /*pd=*/false, report);
  }

  /// Posterior-dropout ELBO: steps in `t_set` sample z from the prior; the
  /// reconstruction and KL terms accumulate only over the complement.
  Var elbo_pd(Tape<T>& t, const Episode1D& ep, const std::vector<uint8_t>& t_set, Rng rng,
              ObjectiveReport* report = nullptr) const {
    if (static_cast<int>(t_set.size()) != ep.T)
      throw std::invalid_argument("elbo_pd: dropout mask size != T");
    return chain(t, ep, t_set, rng, /*pd=*/true, report);
  }

  /// Per-step target NLL with latents sampled from the context-conditioned
  /// prior chain; S chains averaged. Steps without targets give NaN.
  std::vector<double> target_nll(const Episode1D& ep, int S, Rng rng) const {
    std::vector<double> acc(ep.T, 0.0);
    std::vector<int> cnt(ep.T, 0);
    for (int s = 0; s < S; ++s) {
      Tape<T> t;
      t.set_grad_enabled(false);
      Var h = t.param(*h0_), c = t.param(*c0_);
      Var z = t.constant(Tensor<T>({cfg_.zdim}));
      for (int step = 0; step < ep.T; ++step) {
        const auto ctx_pts = points(ep.steps[step], /*ctx=*/true, /*tgt=*/false);
        const auto enc = encode_set(t, ctx_pts);
        const auto pr = prior_step(t, h, c, z, enc);
        h = pr.h;
        c = pr.c;
        z = sample(t, pr.prior, rng);
        const auto tgt = points(ep.steps[step], false, true);
        if (tgt.empty()) continue;
        std::vector<T> xs(tgt.size());
        Tensor<T> ys({static_cast<int>(tgt.size())});
        for (size_t i = 0; i < tgt.size(); ++i) {
          xs[i] = static_cast<T>(tgt[i].first);
          ys[static_cast<int>(i)] = static_cast<T>(tgt[i].second);
        }
        const GaussianVar pred = decode_rows(t, xs, z, enc.s);
        acc[step] += -normal_logpdf(ys, t.val(pred.mu), t.val(pred.sigma)) /
                     static_cast<double>(tgt.size());
        cnt[step]++;
      }
    }
    std::vector<double> out(ep.T, std::numeric_limits<double>::quiet_NaN());
    for (int step = 0; step < ep.T; ++step)
      if (cnt[step] > 0) out[step] = acc[step] / cnt[step];
    return out;
  }

  /// One posterior-chain sample with its log-densities, for importance
  /// sampling: returns (log p(z|C), log q(z|C,D), log p(Y|X,z)).
  struct ChainSample {
    double logp = 0, logq = 0, loglik = 0;
  };
  ChainSample posterior_chain_sample(const Episode1D& ep, Rng& rng) const {
    Tape<T> t;
    t.set_grad_enabled(false);
    ChainSample cs;
    Var h = t.param(*h0_), c = t.param(*c0_);
    Var z = t.constant(Tensor<T>({cfg_.zdim}));
    for (int step = 0; step < ep.T; ++step) {
      const auto enc_ctx = encode_set(t, points(ep.steps[step], true, false));
      const auto enc_full = encode_set(t, points(ep.steps[step], true, true));
      const auto pr = prior_step(t, h, c, z, enc_ctx);
      h = pr.h;
      c = pr.c;
      const GaussianVar post = posterior_step(t, pr.h, enc_full);
      z = sample(t, post, rng);
      cs.logq += normal_logpdf(t.val(z), t.val(post.mu), t.val(post.sigma));
      cs.logp += normal_logpdf(t.val(z), t.val(pr.prior.mu), t.val(pr.prior.sigma));
      const auto tgt = points(ep.steps[step], false, true);
      if (tgt.empty()) continue;
      std::vector<T> xs(tgt.size());
      Tensor<T> ys({static_cast<int>(tgt.size())});
      for (size_t i = 0; i < tgt.size(); ++i) {
        xs[i] = static_cast<T>(tgt[i].first);
        ys[static_cast<int>(i)] = static_cast<T>(tgt[i].second);
      }
      const GaussianVar pred = decode_rows(t, xs, z, enc_ctx.s);
      cs.loglik += normal_logpdf(ys, t.val(pred.mu), t.val(pred.sigma));
    }
    return cs;
  }

  /// Mean and +-band prediction on a query grid from one prior-chain sample
  /// path (for plotting).
  struct GridPrediction {
    std::vector<double> mean, std;
  };
  std::vector<GridPrediction> predict_grid(const Episode1D& ep, const std::vector<double>& xgrid,
                                           Rng rng) const {
    std::vector<GridPrediction> out(ep.T);
    Tape<T> t;
    t.set_grad_enabled(false);
    Var h = t.param(*h0_), c = t.param(*c0_);
    Var z = t.constant(Tensor<T>({cfg_.zdim}));
    for (int step = 0; step < ep.T; ++step) {
      const auto enc = encode_set(t, points(ep.steps[step], true, false));
      const auto pr = prior_step(t, h, c, z, enc);
      h = pr.h;
      c = pr.c;
      z = sample(t, pr.prior, rng);
      std::vector<T> xs(xgrid.begin(), xgrid.end());
      const GaussianVar pred = decode_rows(t, xs, z, enc.s);
      out[step].mean.assign(t.val(pred.mu).data.begin(), t.val(pred.mu).data.end());
      out[step].std.assign(t.val(pred.sigma).data.begin(), t.val(pred.sigma).data.end());
    }
    return out;
  }

  static std::vector<std::pair<double, double>> points(const Step1D& step, bool ctx, bool tgt) {
    std::vector<std::pair<double, double>> out;
    for (size_t i = 0; i < step.x.size(); ++i)
      if ((ctx && step.ctx_mask[i]) || (tgt && step.tgt_mask[i]))
        out.emplace_back(step.x[i], step.y[i]);
    return out;
  }

 private:
  GaussianVar latent_stats(Tape<T>& t, Var h, Var r) const {
    Var u = t.relu(stats_trunk_.apply(t, t.concat0(h, r)));
    return {stats_mu_.apply(t, u), latent_std(t, stats_raw_.apply(t, u))};
  }

  Var sample(Tape<T>& t, const GaussianVar& g, Rng& rng) const {
    Tensor<T> eps({t.numel(g.mu)});
    for (auto& e : eps.data) e = static_cast<T>(rng.normal());
    return t.add(g.mu, t.mul(g.sigma, t.constant(std::move(eps))));
  }

  Var chain(Tape<T>& t, const Episode1D& ep, const std::vector<uint8_t>& t_set, Rng rng, bool pd,
            ObjectiveReport* report) const {
    ObjectiveReport rep;
    rep.recon.assign(ep.T, 0.0);
    rep.kl.assign(ep.T, 0.0);
    rep.dropped.assign(t_set.begin(), t_set.end());

    Var h = t.param(*h0_), c = t.param(*c0_);
    Var z = t.constant(Tensor<T>({cfg_.zdim}));
    std::vector<Var> terms;
    for (int step = 0; step < ep.T; ++step) {
      const auto enc_ctx = encode_set(t, points(ep.steps[step], true, false));
      const auto enc_full = encode_set(t, points(ep.steps[step], true, true));
      const auto pr = prior_step(t, h, c, z, enc_ctx);
      h = pr.h;
      c = pr.c;
      const GaussianVar post = posterior_step(t, pr.h, enc_full);
      const bool from_prior = t_set[step] != 0;
      z = sample(t, from_prior ? pr.prior : post, rng);
      if (from_prior) continue;  // PD: no terms for prior-sampled steps

      Var kl = t.gaussian_kl(post.mu, post.sigma, pr.prior.mu, pr.prior.sigma);
      rep.kl[step] = t.val(kl)[0];
      terms.push_back(t.neg(kl));
      const auto tgt = points(ep.steps[step], false, true);
      if (!tgt.empty()) {
        std::vector<std::vector<T>> rows;
        for (const auto& [x, y] : tgt) rows.push_back({static_cast<T>(x), static_cast<T>(y)});
        std::sort(rows.begin(), rows.end());
        std::vector<T> xs(rows.size());
        Tensor<T> ys({static_cast<int>(rows.size())});
        for (size_t i = 0; i < rows.size(); ++i) {
          xs[i] = rows[i][0];
          ys[static_cast<int>(i)] = rows[i][1];
        }
        const GaussianVar pred = decode_rows(t, xs, z, enc_ctx.s);
        Var ll = t.normal_loglik(ys, pred.mu, pred.sigma);
        rep.recon[step] = t.val(ll)[0];
        terms.push_back(ll);
      }
      if (!std::isfinite(rep.kl[step]) || !std::isfinite(rep.recon[step]))
        throw std::runtime_error("elbo: non-finite term at step " + std::to_string(step + 1));
    }
    Var total = terms.empty() ? t.constant(Tensor<T>::scalar(T(0))) : t.addn(terms);
    const double v = t.val(total)[0];
    if (pd) {
      rep.l_pd = v;
      rep.alpha = 1.0;
    } else {
      rep.l_snp = v;
      rep.alpha = 0.0;
    }
    rep.finalize();
    if (report) *report = rep;
    return total;
  }

  Snp1dConfig cfg_;
  ParamStore<T> ps_;
  Mlp<T> det_enc_, lat_enc_;
  Dense<T> stats_trunk_, stats_mu_, stats_raw_;
  LstmCell<T> lstm_;
  Param<T>*h0_ = nullptr, *c0_ = nullptr;
  Mlp<T> dec_trunk_;
  Dense<T> dec_mu_, dec_raw_;
};

/// NP baseline: one latent per step-problem with cumulative context pooling
/// and the normalized-time query augmentation (x, t').
template <class T>
class NpModel {
 public:
  explicit NpModel(const Snp1dConfig& cfg) : cfg_(cfg) {
    Rng rng(cfg.init_seed);
    const int h = cfg.hidden;
    det_enc_ = Mlp<T>(ps_, "det_enc", {3, h, h, h, h, h, cfg.sdim}, rng);
    lat_enc_ = Mlp<T>(ps_, "lat_enc", {3, h, h, cfg.rdim}, rng);
    stats_trunk_ = Dense<T>(ps_, "stats.trunk", cfg.rdim, h, rng);
    stats_mu_ = Dense<T>(ps_, "stats.mu", h, cfg.zdim, rng);
    stats_raw_ = Dense<T>(ps_, "stats.raw", h, cfg.zdim, rng);
    dec_trunk_ = Mlp<T>(ps_, "dec.trunk", {2 + cfg.zdim + cfg.sdim, h, h, h}, rng, true);
    dec_mu_ = Dense<T>(ps_, "dec.mu", h, 1, rng);
    dec_raw_ = Dense<T>(ps_, "dec.raw", h, 1, rng);
  }

  ParamStore<T>& params() { return ps_; }
  const Snp1dConfig& config() const { return cfg_; }

  /// ELBO over the flattened episode: at step t the prior pools every context
  /// point observed at steps <= t, the posterior additionally sees D_t.
  Var elbo(Tape<T>& t, const Episode1D& ep, Rng rng, ObjectiveReport* report = nullptr) const {
    ObjectiveReport rep;
    rep.recon.assign(ep.T, 0.0);
    rep.kl.assign(ep.T, 0.0);
    rep.dropped.assign(ep.T, 0);

    CumulativeEncoder cum(*this, t);
    std::vector<Var> terms;
    for (int step = 0; step < ep.T; ++step) {
      cum.add_context(ep, step);
      const auto prior_enc = cum.context_encoding();
      const GaussianVar prior = latent_stats(t, prior_enc.r);
      const auto tgt = tgt_rows(ep, step);
      const GaussianVar post = latent_stats(t, cum.with_targets(ep, step).r);
      Tensor<T> eps({cfg_.zdim});
      for (auto& e : eps.data) e = static_cast<T>(rng.normal());
      Var z = t.add(post.mu, t.mul(post.sigma, t.constant(std::move(eps))));
      Var kl = t.gaussian_kl(post.mu, post.sigma, prior.mu, prior.sigma);
      rep.kl[step] = t.val(kl)[0];
      terms.push_back(t.neg(kl));
      if (!tgt.xs.empty()) {
        const GaussianVar pred = decode_rows(t, tgt.xs, tgt.ts, z, prior_enc.s);
        Var ll = t.normal_loglik(tgt.ys, pred.mu, pred.sigma);
        rep.recon[step] = t.val(ll)[0];
        terms.push_back(ll);
      }
    }
    Var total = terms.empty() ? t.constant(Tensor<T>::scalar(T(0))) : t.addn(terms);
    rep.l_snp = t.val(total)[0];
    rep.finalize();
    if (report) *report = rep;
    return total;
  }

  /// Independent per-step latents: one chain sample bundles all steps.
  SnpModel<double>::ChainSample posterior_chain_sample(const Episode1D& ep, Rng& rng) const {
    Tape<T> t;
    t.set_grad_enabled(false);
    typename SnpModel<double>::ChainSample cs;
    CumulativeEncoder cum(*this, t);
    for (int step = 0; step < ep.T; ++step) {
      cum.add_context(ep, step);
      const auto prior_enc = cum.context_encoding();
      const GaussianVar prior = latent_stats(t, prior_enc.r);
      const GaussianVar post = latent_stats(t, cum.with_targets(ep, step).r);
      Tensor<T> eps({cfg_.zdim});
      for (auto& e : eps.data) e = static_cast<T>(rng.normal());
      Var z = t.add(post.mu, t.mul(post.sigma, t.constant(std::move(eps))));
      cs.logq += normal_logpdf(t.val(z), t.val(post.mu), t.val(post.sigma));
      cs.logp += normal_logpdf(t.val(z), t.val(prior.mu), t.val(prior.sigma));
      const auto tgt = tgt_rows(ep, step);
      if (tgt.xs.empty()) continue;
      const GaussianVar pred = decode_rows(t, tgt.xs, tgt.ts, z, prior_enc.s);
      cs.loglik += normal_logpdf(tgt.ys, t.val(pred.mu), t.val(pred.sigma));
    }
    return cs;
  }

  std::vector<double> target_nll(const Episode1D& ep, int S, Rng rng) const {
    std::vector<double> acc(ep.T, 0.0);
    std::vector<int> cnt(ep.T, 0);
    for (int s = 0; s < S; ++s) {
      Tape<T> t;
      t.set_grad_enabled(false);
      CumulativeEncoder cum(*this, t);
      for (int step = 0; step < ep.T; ++step) {
        cum.add_context(ep, step);
        const auto enc = cum.context_encoding();
        const GaussianVar prior = latent_stats(t, enc.r);
        Tensor<T> eps({cfg_.zdim});
        for (auto& e : eps.data) e = static_cast<T>(rng.normal());
        Var z = t.add(prior.mu, t.mul(prior.sigma, t.constant(std::move(eps))));
        const auto tgt = tgt_rows(ep, step);
        if (tgt.xs.empty()) continue;
        const GaussianVar pred = decode_rows(t, tgt.xs, tgt.ts, z, enc.s);
        acc[step] += -normal_logpdf(tgt.ys, t.val(pred.mu), t.val(pred.sigma)) /
                     static_cast<double>(tgt.xs.size());
        cnt[step]++;
      }
    }
    std::vector<double> out(ep.T, std::numeric_limits<double>::quiet_NaN());
    for (int step = 0; step < ep.T; ++step)
      if (cnt[step] > 0) out[step] = acc[step] / cnt[step];
    return out;
  }

 private:
  struct TargetRows {
    std::vector<T> xs, ts;
    Tensor<T> ys;
  };

  TargetRows tgt_rows(const Episode1D& ep, int step) const {
    std::vector<std::vector<T>> rows;
    for (size_t i = 0; i < ep.steps[step].x.size(); ++i)
      if (ep.steps[step].tgt_mask[i])
        rows.push_back({static_cast<T>(ep.steps[step].x[i]), static_cast<T>(ep.steps[step].y[i])});
    std::sort(rows.begin(), rows.end());
    TargetRows out;
    out.xs.resize(rows.size());
    out.ts.assign(rows.size(), static_cast<T>(np_time_feature(step, ep.T)));
    out.ys = Tensor<T>({std::max<int>(1, static_cast<int>(rows.size()))});
    if (rows.empty()) {
      out.ys = Tensor<T>({1});
      out.xs.clear();
      return out;
    }
    out.ys = Tensor<T>({static_cast<int>(rows.size())});
    for (size_t i = 0; i < rows.size(); ++i) {
      out.xs[i] = rows[i][0];
      out.ys[static_cast<int>(i)] = rows[i][1];
    }
    return out;
  }

  /// Incremental pooled encodings: per-point encodings never change, so the
  /// cumulative mean over steps <= t is a running sum.
  class CumulativeEncoder {
   public:
    CumulativeEncoder(const NpModel& m, Tape<T>& t) : m_(m), t_(t) {}

    void add_context(const Episode1D& ep, int step) {
      const auto rows = m_.encode_points(t_, ep, step, /*ctx=*/true, /*tgt=*/false);
      if (rows.count == 0) return;
      sums_.push_back(rows);
      count_ += rows.count;
    }

    StepEncodingVar context_encoding() const { return pooled(sums_, count_); }

    StepEncodingVar with_targets(const Episode1D& ep, int step) const {
      const auto rows = m_.encode_points(t_, ep, step, /*ctx=*/false, /*tgt=*/true);
      if (rows.count == 0) return context_encoding();
      auto sums = sums_;
      sums.push_back(rows);
      return pooled(sums, count_ + rows.count);
    }

   private:
    struct SumEnc {
      Var r_sum, s_sum;
      int count = 0;
    };

    StepEncodingVar pooled(const std::vector<SumEnc>& sums, int count) const {
      StepEncodingVar enc;
      enc.count = count;
      if (count == 0) {
        enc.r = t_.constant(Tensor<T>({m_.cfg_.rdim}));
        enc.s = t_.constant(Tensor<T>({m_.cfg_.sdim}));
        return enc;
      }
      std::vector<Var> rs, ss;
      for (const auto& e : sums) {
        rs.push_back(e.r_sum);
        ss.push_back(e.s_sum);
      }
      enc.r = t_.scale(t_.addn(rs), T(1) / T(count));
      enc.s = t_.scale(t_.addn(ss), T(1) / T(count));
      return enc;
    }

    friend class NpModel;
    const NpModel& m_;
    Tape<T>& t_;
    std::vector<SumEnc> sums_;
    int count_ = 0;
  };
  friend class CumulativeEncoder;

  typename CumulativeEncoder::SumEnc encode_points(Tape<T>& t, const Episode1D& ep, int step,
                                                   bool ctx, bool tgt) const {
    std::vector<std::vector<T>> rows;
    const auto& st = ep.steps[step];
    const T tf = static_cast<T>(np_time_feature(step, ep.T));
    for (size_t i = 0; i < st.x.size(); ++i)
      if ((ctx && st.ctx_mask[i]) || (tgt && st.tgt_mask[i]))
        rows.push_back({static_cast<T>(st.x[i]), tf, static_cast<T>(st.y[i])});
    typename CumulativeEncoder::SumEnc out;
    out.count = static_cast<int>(rows.size());
    if (rows.empty()) return out;
    Var m = t.constant(detail1d::sorted_rows(std::move(rows), 3));
    out.s_sum = t.scale(t.mean_rows(det_enc_.apply_rows(t, m)), T(out.count));
    out.r_sum = t.scale(t.mean_rows(lat_enc_.apply_rows(t, m)), T(out.count));
    return out;
  }

  GaussianVar latent_stats(Tape<T>& t, Var r) const {
    Var u = t.relu(stats_trunk_.apply(t, r));
    return {stats_mu_.apply(t, u), latent_std(t, stats_raw_.apply(t, u))};
  }

  GaussianVar decode_rows(Tape<T>& t, const std::vector<T>& xs, const std::vector<T>& ts, Var z,
                          Var s) const {
    const int m = static_cast<int>(xs.size());
    Tensor<T> xm({m, 2});
    for (int i = 0; i < m; ++i) {
      xm.data[2 * i] = xs[i];
      xm.data[2 * i + 1] = ts[i];
    }
    Var in = t.concat_cols({t.constant(xm), t.repeat_rows(z, m), t.repeat_rows(s, m)});
    Var hid = dec_trunk_.apply_rows(t, in);
    Var mu = t.reshape(dec_mu_.apply_rows(t, hid), {m});
    Var sigma = decoder_std(t, t.reshape(dec_raw_.apply_rows(t, hid), {m}));
    return {mu, sigma};
  }

  Snp1dConfig cfg_;
  ParamStore<T> ps_;
  Mlp<T> det_enc_, lat_enc_;
  Dense<T> stats_trunk_, stats_mu_, stats_raw_;
  Mlp<T> dec_trunk_;
  Dense<T> dec_mu_, dec_raw_;
};

/// Importance-sampled marginal NLL: -log[(1/K) sum_k lik_k * p_k / q_k],
/// computed in log space with the max-shift trick. All -inf weights report
/// +inf instead of overflowing.
template <class DrawFn>
double importance_nll(int K, DrawFn&& draw) {
  if (K < 1) throw std::invalid_argument("importance_nll: K must be >= 1");
  std::vector<double> logw(K);
  for (int k = 0; k < K; ++k) logw[k] = draw();
  const double lse = logsumexp(logw);
  if (!std::isfinite(lse)) return std::numeric_limits<double>::infinity();
  return -(lse - std::log(static_cast<double>(K)));
}

}  // namespace snp
