#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "snp/episode.hpp"
#include "snp/nn.hpp"
#include "snp/rng.hpp"
#include "snp/shapes2d.hpp"
#include "snp/snp_model.hpp"
#include "snp/tape.hpp"

namespace snp {

struct TgqnConfig {
  int image_hw = 64;
  int latent_hw = 16;
  int rep_depth = 256;   // context representation depth
  int hidden = 128;      // ConvLSTM hidden state depth
  int enc_depth = 128;   // renderer image encoding depth
  int z_depth = 4;       // latent depth per DRAW step
  int draw_steps = 6;    // L
  int renderer_iters = 6;
  int z_proj_depth = 108;  // transition-state depth of the z-path projection
  double rgb_var = 2.0;    // fixed Gaussian variance on RGB values
  uint64_t init_seed = 1;

  int z_total() const { return z_depth * draw_steps; }
  int factor() const {
    if (image_hw != 2 * latent_hw && image_hw != 4 * latent_hw)
      throw std::invalid_argument("tgqn: image_hw must be 2x or 4x latent_hw");
    return image_hw / latent_hw;
  }
};

/// Independent per-step coin with probability 0.3 of posterior membership;
/// returns the prior-sampled set T (1 = sample from the prior transition).
inline std::vector<uint8_t> pd_mask(int T, uint64_t seed, double posterior_prob = 0.3) {
  if (T < 1) throw std::invalid_argument("pd_mask: T must be >= 1");
  Rng rng(seed);
  std::vector<uint8_t> mask(T);
  for (auto& m : mask) m = rng.bernoulli(posterior_prob) ? 0 : 1;
  return mask;
}

namespace tgqn_detail {

/// Observation patch (row-major channels-last) -> [3,H,W] tensor.
template <class T>
Tensor<T> patch_chw(const std::vector<float>& patch, int hw) {
  Tensor<T> out({3, hw, hw});
  for (int r = 0; r < hw; ++r)
    for (int c = 0; c < hw; ++c)
      for (int ch = 0; ch < 3; ++ch)
        out.data[(static_cast<size_t>(ch) * hw + r) * hw + c] =
            static_cast<T>(patch[(static_cast<size_t>(r) * hw + c) * 3 + ch]);
  return out;
}

/// Canonical observation order so pooled encodings are bitwise
/// permutation-invariant: sort by viewpoint, ties by patch content.
inline std::vector<int> canonical_order(const std::vector<const Obs2D*>& obs) {
  std::vector<int> idx(obs.size());
  for (size_t i = 0; i < idx.size(); ++i) idx[i] = static_cast<int>(i);
  std::sort(idx.begin(), idx.end(), [&](int a, int b) {
    if (obs[a]->view_row != obs[b]->view_row) return obs[a]->view_row < obs[b]->view_row;
    if (obs[a]->view_col != obs[b]->view_col) return obs[a]->view_col < obs[b]->view_col;
    return obs[a]->patch < obs[b]->patch;
  });
  return idx;
}

}  // namespace tgqn_detail

/// GQN-style tower: strided conv stack with skip connections and the query
/// broadcast-concatenated at the latent resolution. Output [rep_depth, l, l].
template <class T>
struct TowerEncoder {
  Conv<T> c1, c2, c3, skip1, c4, c5, c6;
  int image_hw = 0, latent_hw = 0, view_dim = 2;

  TowerEncoder() = default;
  TowerEncoder(ParamStore<T>& ps, const std::string& name, const TgqnConfig& cfg, int view_dim_,
               Rng& rng)
      : image_hw(cfg.image_hw), latent_hw(cfg.latent_hw), view_dim(view_dim_) {
    const int d = cfg.rep_depth;
    const int dh = std::max(1, d / 2);
    const bool deep = cfg.factor() == 4;
    c1 = Conv<T>(ps, name + ".c1", 3, d, 2, 2, 0, rng);
    c2 = Conv<T>(ps, name + ".c2", d, dh, 3, 1, 1, rng);
    if (deep) {
      c3 = Conv<T>(ps, name + ".c3", dh, d, 2, 2, 0, rng);
      skip1 = Conv<T>(ps, name + ".skip1", d, d, 2, 2, 0, rng);
    } else {
      c3 = Conv<T>(ps, name + ".c3", dh, d, 3, 1, 1, rng);
      skip1 = Conv<T>(ps, name + ".skip1", d, d, 3, 1, 1, rng);
    }
    c4 = Conv<T>(ps, name + ".c4", d + view_dim, dh, 3, 1, 1, rng);
    c5 = Conv<T>(ps, name + ".c5", dh, d, 3, 1, 1, rng);
    c6 = Conv<T>(ps, name + ".c6", d, d, 1, 1, 0, rng);
  }

  Var apply(Tape<T>& t, Var image, const std::vector<T>& view) const {
    if (static_cast<int>(view.size()) != view_dim)
      throw std::invalid_argument("tower: query size mismatch");
    Var h1 = t.relu(c1.apply(t, image));
    Var h2 = t.relu(c2.apply(t, h1));
    Var h3 = t.relu(c3.apply(t, h2));
    Var t0 = t.add(h3, skip1.apply(t, h1));
    Var v = t.broadcast_hw(t.constant(Tensor<T>({view_dim}, view)), latent_hw, latent_hw);
    Var h4 = t.relu(c4.apply(t, t.concat0(t0, v)));
    Var h5 = t.relu(c5.apply(t, h4));
    return t.relu(c6.apply(t, t.add(h5, t0)));
  }
};

/// Auto-regressive convolutional latent sampler. The inference RNN reads the
/// generative RNN's hidden state; the sufficient-statistics head is shared, so
/// an empty observation set falls back to the prior exactly.
template <class T>
struct ConvDraw {
  ConvLstmCell<T> prior_rnn, post_rnn;
  Conv<T> stats_mu, stats_raw;
  Param<T>*hp0 = nullptr, *cp0 = nullptr, *hq0 = nullptr, *cq0 = nullptr;
  int L = 0, z_depth = 0, hw = 0, hidden = 0;

  ConvDraw() = default;
  ConvDraw(ParamStore<T>& ps, const std::string& name, const TgqnConfig& cfg, int cond_p_ch,
           int cond_q_ch, Rng& rng)
      : L(cfg.draw_steps), z_depth(cfg.z_depth), hw(cfg.latent_hw), hidden(cfg.hidden) {
    prior_rnn = ConvLstmCell<T>(ps, name + ".p", cfg.z_depth + cond_p_ch, cfg.hidden, rng);
    post_rnn =
        ConvLstmCell<T>(ps, name + ".q", cfg.z_depth + cfg.hidden + cond_q_ch, cfg.hidden, rng);
    stats_mu = Conv<T>(ps, name + ".mu", cfg.hidden, cfg.z_depth, 3, 1, 1, rng);
    stats_raw = Conv<T>(ps, name + ".raw", cfg.hidden, cfg.z_depth, 3, 1, 1, rng);
    hp0 = &ps.add(name + ".hp0", {cfg.hidden, hw, hw});
    cp0 = &ps.add(name + ".cp0", {cfg.hidden, hw, hw});
    hq0 = &ps.add(name + ".hq0", {cfg.hidden, hw, hw});
    cq0 = &ps.add(name + ".cq0", {cfg.hidden, hw, hw});
  }

  struct Trace {
    std::vector<GaussianVar> prior, post;  // per DRAW step
    std::vector<Var> kl;                   // per DRAW step (posterior mode)
    std::vector<Var> z;                    // sampled slices
    Var z_full;                            // channel concat over slices
  };

  GaussianVar stats(Tape<T>& t, Var h) const {
    return {stats_mu.apply(t, h), latent_std(t, stats_raw.apply(t, h))};
  }

  Var sample(Tape<T>& t, const GaussianVar& g, Rng& rng) const {
    Tensor<T> eps(t.val(g.mu).shape);
    for (auto& e : eps.data) e = static_cast<T>(rng.normal());
    return t.add(g.mu, t.mul(g.sigma, t.constant(std::move(eps))));
  }

  /// Generation: L steps of the prior RNN, sampling each slice from the prior.
  Trace prior_rollout(Tape<T>& t, Var cond_p, Rng& rng) const {
    Trace tr;
    Var hp = t.param(*hp0), cp = t.param(*cp0);
    Var z_prev = t.constant(Tensor<T>({z_depth, hw, hw}));
    for (int l = 0; l < L; ++l) {
      auto [h2, c2] = prior_rnn.step(t, t.concat0(z_prev, cond_p), hp, cp);
      hp = h2;
      cp = c2;
      const GaussianVar pr = stats(t, hp);
      Var z = sample(t, pr, rng);
      tr.prior.push_back(pr);
      tr.z.push_back(z);
      z_prev = z;
    }
    tr.z_full = t.concat0(tr.z);
    return tr;
  }

  /// Inference: the posterior RNN reads [z^{l-1}, hp_{l-1}, cond_q]; after
  /// sampling, the generative RNN advances to provide the matched prior
  /// statistics for the KL.
  Trace posterior_rollout(Tape<T>& t, Var cond_p, Var cond_q, Rng& rng) const {
    Trace tr;
    Var hp = t.param(*hp0), cp = t.param(*cp0);
    Var hq = t.param(*hq0), cq = t.param(*cq0);
    Var z_prev = t.constant(Tensor<T>({z_depth, hw, hw}));
    for (int l = 0; l < L; ++l) {
      auto [hq2, cq2] = post_rnn.step(t, t.concat0({z_prev, hp, cond_q}), hq, cq);
      hq = hq2;
      cq = cq2;
      const GaussianVar po = stats(t, hq);
      Var z = sample(t, po, rng);
      auto [hp2, cp2] = prior_rnn.step(t, t.concat0(z_prev, cond_p), hp, cp);
      hp = hp2;
      cp = cp2;
      const GaussianVar pr = stats(t, hp);
      tr.post.push_back(po);
      tr.prior.push_back(pr);
      tr.kl.push_back(t.gaussian_kl(po.mu, po.sigma, pr.mu, pr.sigma));
      tr.z.push_back(z);
      z_prev = z;
    }
    tr.z_full = t.concat0(tr.z);
    return tr;
  }
};

/// Iterative additive-canvas renderer conditioned on (x, z, h).
template <class T>
struct Renderer {
  Conv<T> enc1, enc2;
  ConvLstmCell<T> cell;
  Conv<T> dec1;
  ConvT<T> dec2;
  ConvT<T> dec3_deep;
  Conv<T> dec3_shallow;
  Param<T>*d0 = nullptr, *cc0 = nullptr;
  int image_hw = 0, latent_hw = 0, iters = 0, query_dim = 2;
  bool deep = true;

  Renderer() = default;
  Renderer(ParamStore<T>& ps, const std::string& name, const TgqnConfig& cfg, int cond_ch,
           int query_dim_, Rng& rng)
      : image_hw(cfg.image_hw),
        latent_hw(cfg.latent_hw),
        iters(cfg.renderer_iters),
        query_dim(query_dim_),
        deep(cfg.factor() == 4) {
    const int e = cfg.enc_depth;
    const int eh = std::max(1, e / 2);
    enc1 = Conv<T>(ps, name + ".enc1", 3, eh, 2, 2, 0, rng);
    if (deep)
      enc2 = Conv<T>(ps, name + ".enc2", eh, e, 2, 2, 0, rng);
    else
      enc2 = Conv<T>(ps, name + ".enc2", eh, e, 3, 1, 1, rng);
    cell = ConvLstmCell<T>(ps, name + ".cell", e + query_dim_ + cond_ch, cfg.hidden, rng);
    dec1 = Conv<T>(ps, name + ".dec1", cfg.hidden, e, 3, 1, 1, rng);
    dec2 = ConvT<T>(ps, name + ".dec2", e, eh, 2, 2, 0, rng);
    if (deep)
      dec3_deep = ConvT<T>(ps, name + ".dec3", eh, 3, 2, 2, 0, rng);
    else
      dec3_shallow = Conv<T>(ps, name + ".dec3", eh, 3, 3, 1, 1, rng);
    d0 = &ps.add(name + ".d0", {cfg.hidden, latent_hw, latent_hw});
    cc0 = &ps.add(name + ".c0", {cfg.hidden, latent_hw, latent_hw});
  }

  struct Trace {
    std::vector<Var> increments;  // decoder output per iteration
    Var canvas;                   // final additive canvas
  };

  /// cond = channel concat of conditioning tensors at latent resolution
  /// (z_t and h_t, or just z for the baseline).
  Trace render(Tape<T>& t, const std::vector<T>& query, Var cond, int n_iters = -1) const {
    if (static_cast<int>(query.size()) != query_dim)
      throw std::invalid_argument("render: query size mismatch");
    if (n_iters < 0) n_iters = iters;
    Trace tr;
    Var canvas = t.constant(Tensor<T>({3, image_hw, image_hw}));
    Var qv = t.broadcast_hw(t.constant(Tensor<T>({query_dim}, query)), latent_hw, latent_hw);
    Var d = t.param(*d0), c = t.param(*cc0);
    for (int i = 0; i < n_iters; ++i) {
      Var e = t.relu(enc2.apply(t, t.relu(enc1.apply(t, canvas))));
      auto [d2, c2] = cell.step(t, t.concat0({e, qv, cond}), d, c);
      d = d2;
      c = c2;
      Var up = t.relu(dec2.apply(t, t.relu(dec1.apply(t, d))));
      Var inc = deep ? dec3_deep.apply(t, up) : dec3_shallow.apply(t, up);
      tr.increments.push_back(inc);
      canvas = t.add(canvas, inc);
    }
    tr.canvas = canvas;
    return tr;
  }
};

/// Target subsampling for training: at most k targets per step (0 = all),
/// chosen deterministically from the given stream.
struct TargetSampling {
  int max_per_step = 0;
  uint64_t seed = 0;
};

/// Temporal GQN on the 2D environment: tower representations, ConvLSTM
/// transition over [proj(z_{t-1}), C_t], Temporal-ConvDRAW latents, backward
/// inference RNN and the iterative renderer.
template <class T>
class TgqnModel {
 public:
  explicit TgqnModel(const TgqnConfig& cfg) : cfg_(cfg) {
    Rng rng(cfg.init_seed);
    tower_ = TowerEncoder<T>(ps_, "tower", cfg, 2, rng);
    zproj_ = Conv<T>(ps_, "trans.zproj", cfg.z_total(), cfg.z_proj_depth, 1, 1, 0, rng);
    trans_ = ConvLstmCell<T>(ps_, "trans.cell", cfg.z_proj_depth + cfg.rep_depth, cfg.hidden, rng);
    h0_ = &ps_.add("trans.h0", {cfg.hidden, cfg.latent_hw, cfg.latent_hw});
    c0_ = &ps_.add("trans.c0", {cfg.hidden, cfg.latent_hw, cfg.latent_hw});
    z0_ = &ps_.add("trans.z0", {cfg.z_total(), cfg.latent_hw, cfg.latent_hw});
    // cond_p = [h_t, C_t]; cond_q = [h_t, b_t]
    draw_ = ConvDraw<T>(ps_, "draw", cfg, cfg.hidden + cfg.rep_depth, cfg.hidden + cfg.hidden, rng);
    back_ = ConvLstmCell<T>(ps_, "back.cell", cfg.rep_depth, cfg.hidden, rng);
    b0_ = &ps_.add("back.h0", {cfg.hidden, cfg.latent_hw, cfg.latent_hw});
    bc0_ = &ps_.add("back.c0", {cfg.hidden, cfg.latent_hw, cfg.latent_hw});
    renderer_ = Renderer<T>(ps_, "render", cfg, cfg.z_total() + cfg.hidden, 2, rng);
  }

  ParamStore<T>& params() { return ps_; }
  const TgqnConfig& config() const { return cfg_; }
  Renderer<T>& renderer() { return renderer_; }

  Var tower_encode(Tape<T>& t, const Obs2D& obs) const {
    const auto q = env2d::normalize_view(obs.view_row, obs.view_col);
    return tower_.apply(t, t.constant(tgqn_detail::patch_chw<T>(obs.patch, cfg_.image_hw)),
                        {static_cast<T>(q[0]), static_cast<T>(q[1])});
  }

  /// Per-tape memo of tower encodings, so an observation appearing in
  /// several pooled sets is encoded once.
  using EncCache = std::map<const Obs2D*, Var>;

  Var tower_encode_cached(Tape<T>& t, const Obs2D& obs, EncCache* cache) const {
    if (!cache) return tower_encode(t, obs);
    auto it = cache->find(&obs);
    if (it != cache->end()) return it->second;
    Var enc = tower_encode(t, obs);
    cache->emplace(&obs, enc);
    return enc;
  }

  /// Mean-pooled scene representation of an observation subset; empty sets
  /// give the zero tensor.
  Var pooled_rep(Tape<T>& t, const std::vector<const Obs2D*>& obs, EncCache* cache = nullptr) const {
    if (obs.empty())
      return t.constant(Tensor<T>({cfg_.rep_depth, cfg_.latent_hw, cfg_.latent_hw}));
    std::vector<Var> encs;
    for (int i : tgqn_detail::canonical_order(obs))
      encs.push_back(tower_encode_cached(t, *obs[i], cache));
    return t.scale(t.addn(encs), T(1) / T(encs.size()));
  }

  struct TransitionOut {
    Var h, c;
  };
  TransitionOut transition(Tape<T>& t, Var h, Var c, Var z_prev, Var ctx_rep) const {
    auto [h2, c2] = trans_.step(t, t.concat0(zproj_.apply(t, z_prev), ctx_rep), h, c);
    return {h2, c2};
  }

  typename ConvDraw<T>::Trace draw_prior(Tape<T>& t, Var h, Var ctx_rep, Rng& rng) const {
    return draw_.prior_rollout(t, t.concat0(h, ctx_rep), rng);
  }

  /// Posterior DRAW; when the backward pass saw no observations at or after
  /// this step (count == 0), the posterior falls back to the prior exactly.
  typename ConvDraw<T>::Trace draw_posterior(Tape<T>& t, Var h, Var ctx_rep, Var b, int count,
                                             Rng& rng) const {
    if (count == 0) {
      auto tr = draw_.prior_rollout(t, t.concat0(h, ctx_rep), rng);
      tr.post = tr.prior;
      for (int l = 0; l < cfg_.draw_steps; ++l)
        tr.kl.push_back(t.constant(Tensor<T>::scalar(T(0))));
      return tr;
    }
    return draw_.posterior_rollout(t, t.concat0(h, ctx_rep), t.concat0(h, b), rng);
  }

  struct BackwardStates {
    std::vector<Var> b;       // per step, latent-res hidden
    std::vector<int> counts;  // observations at steps >= t
  };

  /// Right-to-left ConvLSTM over per-step pooled encodings of C_t ∪ D_t.
  BackwardStates backward_encode(Tape<T>& t, const Episode2D& ep,
                                 const std::vector<std::vector<const Obs2D*>>& per_step,
                                 EncCache* cache = nullptr) const {
    BackwardStates bs;
    bs.b.resize(ep.T);
    bs.counts.assign(ep.T, 0);
    Var b = t.param(*b0_), c = t.param(*bc0_);
    int count = 0;
    for (int step = ep.T - 1; step >= 0; --step) {
      Var rep = pooled_rep(t, per_step[step], cache);
      auto [b2, c2] = back_.step(t, rep, b, c);
      b = b2;
      c = c2;
      count += static_cast<int>(per_step[step].size());
      bs.b[step] = b;
      bs.counts[step] = count;
    }
    return bs;
  }

  /// Renders the Gaussian mean image for a query from (z_t, h_t).
  typename Renderer<T>::Trace render(Tape<T>& t, float view_row, float view_col, Var z, Var h,
                                     int n_iters = -1) const {
    const auto q = env2d::normalize_view(view_row, view_col);
    return renderer_.render(t, {static_cast<T>(q[0]), static_cast<T>(q[1])}, t.concat0(z, h),
                            n_iters);
  }

  Var elbo_snp(Tape<T>& t, const Episode2D& ep, Rng rng, ObjectiveReport* report = nullptr,
               const TargetSampling& sub = {}) const {
    return chain(t, ep, std::vector<uint8_t>(ep.T, 0), rng, false, report, sub);
  }

  Var elbo_pd(Tape<T>& t, const Episode2D& ep, const std::vector<uint8_t>& t_set, Rng rng,
              ObjectiveReport* report = nullptr, const TargetSampling& sub = {}) const {
    if (static_cast<int>(t_set.size()) != ep.T)
      throw std::invalid_argument("elbo_pd: dropout mask size != T");
    return chain(t, ep, t_set, rng, true, report, sub);
  }

  /// Per-step pixel MSE of prior-chain generations against target images,
  /// averaged over S samples. Canvas values are clamped to [0,1].
  std::vector<double> pixel_mse(const Episode2D& ep, int S, Rng rng,
                                int max_targets_per_step = 0) const {
    std::vector<double> acc(ep.T, 0.0);
    std::vector<int> cnt(ep.T, 0);
    for (int s = 0; s < S; ++s) {
      Tape<T> t;
      t.set_grad_enabled(false);
      Var h = t.param(*h0_), c = t.param(*c0_);
      Var z = t.param(*z0_);
      for (int step = 0; step < ep.T; ++step) {
        Var ctx_rep = pooled_rep(t, step_obs(ep, step, true, false));
        auto tr = transition(t, h, c, z, ctx_rep);
        h = tr.h;
        c = tr.c;
        auto dtr = draw_prior(t, h, ctx_rep, rng);
        z = dtr.z_full;
        auto tgts = step_obs(ep, step, false, true);
        if (max_targets_per_step > 0 && static_cast<int>(tgts.size()) > max_targets_per_step)
          tgts.resize(max_targets_per_step);
        for (const Obs2D* o : tgts) {
          const auto rt = render(t, o->view_row, o->view_col, z, h);
          const auto& canvas = t.val(rt.canvas);
          const auto y = tgqn_detail::patch_chw<T>(o->patch, cfg_.image_hw);
          double mse = 0.0;
          for (int i = 0; i < y.numel(); ++i) {
            const double g = std::clamp(static_cast<double>(canvas[i]), 0.0, 1.0);
            mse += (g - y[i]) * (g - y[i]);
          }
          acc[step] += mse / y.numel();
          cnt[step]++;
        }
      }
    }
    std::vector<double> out(ep.T, std::numeric_limits<double>::quiet_NaN());
    for (int step = 0; step < ep.T; ++step)
      if (cnt[step] > 0) out[step] = acc[step] / cnt[step];
    return out;
  }

  /// Per-step target NLL under prior-chain latents (Gaussian likelihood with
  /// the fixed RGB variance), averaged over samples and targets.
  std::vector<double> target_nll(const Episode2D& ep, int S, Rng rng,
                                 int max_targets_per_step = 0) const {
    std::vector<double> acc(ep.T, 0.0);
    std::vector<int> cnt(ep.T, 0);
    const T rgb_sigma = static_cast<T>(std::sqrt(cfg_.rgb_var));
    for (int s = 0; s < S; ++s) {
      Tape<T> t;
      t.set_grad_enabled(false);
      Var h = t.param(*h0_), c = t.param(*c0_);
      Var z = t.param(*z0_);
      for (int step = 0; step < ep.T; ++step) {
        Var ctx_rep = pooled_rep(t, step_obs(ep, step, true, false));
        auto tr = transition(t, h, c, z, ctx_rep);
        h = tr.h;
        c = tr.c;
        auto dtr = draw_prior(t, h, ctx_rep, rng);
        z = dtr.z_full;
        auto tgts = step_obs(ep, step, false, true);
        if (max_targets_per_step > 0 && static_cast<int>(tgts.size()) > max_targets_per_step)
          tgts.resize(max_targets_per_step);
        for (const Obs2D* o : tgts) {
          const auto rt = render(t, o->view_row, o->view_col, z, h);
          const auto y = tgqn_detail::patch_chw<T>(o->patch, cfg_.image_hw);
          Tensor<T> sig(t.val(rt.canvas).shape);
          std::fill(sig.data.begin(), sig.data.end(), rgb_sigma);
          acc[step] += -normal_logpdf(y, t.val(rt.canvas), sig) / y.numel();
          cnt[step]++;
        }
      }
    }
    std::vector<double> out(ep.T, std::numeric_limits<double>::quiet_NaN());
    for (int step = 0; step < ep.T; ++step)
      if (cnt[step] > 0) out[step] = acc[step] / cnt[step];
    return out;
  }

  /// One posterior-chain sample with log-densities for importance sampling.
  SnpModel<double>::ChainSample posterior_chain_sample(const Episode2D& ep, Rng& rng,
                                                       int max_targets_per_step = 0) const {
    Tape<T> t;
    t.set_grad_enabled(false);
    SnpModel<double>::ChainSample cs;
    std::vector<std::vector<const Obs2D*>> per_step(ep.T);
    for (int step = 0; step < ep.T; ++step) per_step[step] = step_obs(ep, step, true, true);
    EncCache cache;
    const auto bs = backward_encode(t, ep, per_step, &cache);
    Var h = t.param(*h0_), c = t.param(*c0_);
    Var z = t.param(*z0_);
    const T rgb_sigma = static_cast<T>(std::sqrt(cfg_.rgb_var));
    for (int step = 0; step < ep.T; ++step) {
      Var ctx_rep = pooled_rep(t, step_obs(ep, step, true, false), &cache);
      auto tr = transition(t, h, c, z, ctx_rep);
      h = tr.h;
      c = tr.c;
      auto dtr = draw_posterior(t, h, ctx_rep, bs.b[step], bs.counts[step], rng);
      z = dtr.z_full;
      for (int l = 0; l < cfg_.draw_steps; ++l) {
        cs.logq += normal_logpdf(t.val(dtr.z[l]), t.val(dtr.post[l].mu), t.val(dtr.post[l].sigma));
        cs.logp +=
            normal_logpdf(t.val(dtr.z[l]), t.val(dtr.prior[l].mu), t.val(dtr.prior[l].sigma));
      }
      auto tgts = step_obs(ep, step, false, true);
      if (max_targets_per_step > 0 && static_cast<int>(tgts.size()) > max_targets_per_step)
        tgts.resize(max_targets_per_step);
      for (const Obs2D* o : tgts) {
        const auto rt = render(t, o->view_row, o->view_col, z, h);
        const auto y = tgqn_detail::patch_chw<T>(o->patch, cfg_.image_hw);
        Tensor<T> sig(t.val(rt.canvas).shape);
        std::fill(sig.data.begin(), sig.data.end(), rgb_sigma);
        cs.loglik += normal_logpdf(y, t.val(rt.canvas), sig);
      }
    }
    return cs;
  }

  static std::vector<const Obs2D*> step_obs(const Episode2D& ep, int step, bool ctx, bool tgt) {
    std::vector<const Obs2D*> out;
    const auto& st = ep.steps[step];
    for (size_t i = 0; i < st.obs.size(); ++i)
      if ((ctx && st.ctx_mask[i]) || (tgt && st.tgt_mask[i])) out.push_back(&st.obs[i]);
    return out;
  }

 private:
  Var chain(Tape<T>& t, const Episode2D& ep, const std::vector<uint8_t>& t_set, Rng rng, bool pd,
            ObjectiveReport* report, const TargetSampling& sub) const {
    ObjectiveReport rep;
    rep.recon.assign(ep.T, 0.0);
    rep.kl.assign(ep.T, 0.0);
    rep.dropped.assign(t_set.begin(), t_set.end());

    Rng sub_rng(sub.seed);
    std::vector<std::vector<const Obs2D*>> targets(ep.T), all(ep.T);
    for (int step = 0; step < ep.T; ++step) {
      targets[step] = step_obs(ep, step, false, true);
      if (sub.max_per_step > 0 && static_cast<int>(targets[step].size()) > sub.max_per_step) {
        const auto idx =
            sub_rng.sample_without_replacement(static_cast<int>(targets[step].size()),
                                               sub.max_per_step);
        std::vector<const Obs2D*> keep;
        for (int i : idx) keep.push_back(targets[step][i]);
        targets[step] = std::move(keep);
      }
      all[step] = step_obs(ep, step, true, false);
      for (const Obs2D* o : targets[step]) all[step].push_back(o);
    }
    EncCache cache;
    const auto bs = backward_encode(t, ep, all, &cache);

    Var h = t.param(*h0_), c = t.param(*c0_);
    Var z = t.param(*z0_);
    std::vector<Var> terms;
    const T rgb_sigma = static_cast<T>(std::sqrt(cfg_.rgb_var));
    for (int step = 0; step < ep.T; ++step) {
      Var ctx_rep = pooled_rep(t, step_obs(ep, step, true, false), &cache);
      auto tr = transition(t, h, c, z, ctx_rep);
      h = tr.h;
      c = tr.c;
      const bool from_prior = t_set[step] != 0;
      if (from_prior) {
        auto dtr = draw_prior(t, h, ctx_rep, rng);
        z = dtr.z_full;
        continue;
      }
      auto dtr = draw_posterior(t, h, ctx_rep, bs.b[step], bs.counts[step], rng);
      z = dtr.z_full;
      Var kl = t.addn(dtr.kl);
      rep.kl[step] = t.val(kl)[0];
      terms.push_back(t.neg(kl));
      double recon = 0.0;
      for (const Obs2D* o : targets[step]) {
        const auto rt = render(t, o->view_row, o->view_col, z, h);
        Var ll = t.normal_loglik_fixed(tgqn_detail::patch_chw<T>(o->patch, cfg_.image_hw),
                                       rt.canvas, rgb_sigma);
        recon += t.val(ll)[0];
        terms.push_back(ll);
      }
      rep.recon[step] = recon;
      if (!std::isfinite(rep.kl[step]) || !std::isfinite(rep.recon[step]))
        throw std::runtime_error("tgqn elbo: non-finite term at step " + std::to_string(step + 1));
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

  TgqnConfig cfg_;
  ParamStore<T> ps_;
  TowerEncoder<T> tower_;
  Conv<T> zproj_;
  ConvLstmCell<T> trans_;
  Param<T>*h0_ = nullptr, *c0_ = nullptr, *z0_ = nullptr;
  ConvDraw<T> draw_;
  ConvLstmCell<T> back_;
  Param<T>*b0_ = nullptr, *bc0_ = nullptr;
  Renderer<T> renderer_;
};

/// Consistent-GQN baseline: one ConvDRAW latent per episode, sum-pooled
/// contexts, queries augmented with normalized time, no temporal chain.
template <class T>
class GqnModel {
 public:
  explicit GqnModel(const TgqnConfig& cfg) : cfg_(cfg) {
    Rng rng(cfg.init_seed);
    tower_ = TowerEncoder<T>(ps_, "tower", cfg, 3, rng);
    draw_ = ConvDraw<T>(ps_, "draw", cfg, cfg.rep_depth, cfg.rep_depth, rng);
    renderer_ = Renderer<T>(ps_, "render", cfg, cfg.z_total(), 3, rng);
  }

  ParamStore<T>& params() { return ps_; }
  const TgqnConfig& config() const { return cfg_; }
  const ConvDraw<T>& draw() const { return draw_; }

  Var tower_encode(Tape<T>& t, const Obs2D& obs, int step, int horizon) const {
    const auto q = env2d::normalize_view(obs.view_row, obs.view_col);
    return tower_.apply(t, t.constant(tgqn_detail::patch_chw<T>(obs.patch, cfg_.image_hw)),
                        {static_cast<T>(q[0]), static_cast<T>(q[1]), time_feature(step, horizon)});
  }

  using EncCache = std::map<const Obs2D*, Var>;

  /// Sum-pooled representation over (step, observation) pairs.
  Var pooled_sum(Tape<T>& t, const std::vector<std::pair<int, const Obs2D*>>& obs, int horizon,
                 EncCache* cache = nullptr) const {
    if (obs.empty())
      return t.constant(Tensor<T>({cfg_.rep_depth, cfg_.latent_hw, cfg_.latent_hw}));
    std::vector<const Obs2D*> ptrs;
    for (const auto& [s, o] : obs) ptrs.push_back(o);
    std::vector<Var> encs;
    for (int i : tgqn_detail::canonical_order(ptrs)) {
      if (cache) {
        auto it = cache->find(obs[i].second);
        if (it != cache->end()) {
          encs.push_back(it->second);
          continue;
        }
      }
      Var enc = tower_encode(t, *obs[i].second, obs[i].first, horizon);
      if (cache) cache->emplace(obs[i].second, enc);
      encs.push_back(enc);
    }
    return t.addn(encs);
  }

  Var elbo(Tape<T>& t, const Episode2D& ep, Rng rng, ObjectiveReport* report = nullptr,
           const TargetSampling& sub = {}) const {
    ObjectiveReport rep;
    rep.recon.assign(ep.T, 0.0);
    rep.kl.assign(ep.T, 0.0);
    rep.dropped.assign(ep.T, 0);

    Rng sub_rng(sub.seed);
    std::vector<std::pair<int, const Obs2D*>> ctx, full;
    std::vector<std::vector<const Obs2D*>> targets(ep.T);
    for (int step = 0; step < ep.T; ++step) {
      for (const Obs2D* o : TgqnModel<T>::step_obs(ep, step, true, false)) {
        ctx.emplace_back(step, o);
        full.emplace_back(step, o);
      }
      targets[step] = TgqnModel<T>::step_obs(ep, step, false, true);
      if (sub.max_per_step > 0 && static_cast<int>(targets[step].size()) > sub.max_per_step) {
        const auto idx = sub_rng.sample_without_replacement(
            static_cast<int>(targets[step].size()), sub.max_per_step);
        std::vector<const Obs2D*> keep;
        for (int i : idx) keep.push_back(targets[step][i]);
        targets[step] = std::move(keep);
      }
      for (const Obs2D* o : targets[step]) full.emplace_back(step, o);
    }
    EncCache cache;
    Var ctx_rep = pooled_sum(t, ctx, ep.T, &cache);
    Var full_rep = pooled_sum(t, full, ep.T, &cache);
    const bool any_obs = !full.empty();
    auto dtr = any_obs ? draw_.posterior_rollout(t, ctx_rep, full_rep, rng)
                       : draw_.prior_rollout(t, ctx_rep, rng);
    std::vector<Var> terms;
    if (any_obs) {
      Var kl = t.addn(dtr.kl);
      rep.kl[0] = t.val(kl)[0];
      terms.push_back(t.neg(kl));
    }
    const T rgb_sigma = static_cast<T>(std::sqrt(cfg_.rgb_var));
    for (int step = 0; step < ep.T; ++step) {
      double recon = 0.0;
      for (const Obs2D* o : targets[step]) {
        const auto rt = render_query(t, *o, step, ep.T, dtr.z_full);
        Var ll = t.normal_loglik_fixed(tgqn_detail::patch_chw<T>(o->patch, cfg_.image_hw),
                                       rt.canvas, rgb_sigma);
        recon += t.val(ll)[0];
        terms.push_back(ll);
      }
      rep.recon[step] = recon;
    }
    Var total = terms.empty() ? t.constant(Tensor<T>::scalar(T(0))) : t.addn(terms);
    rep.l_snp = t.val(total)[0];
    rep.finalize();
    if (report) *report = rep;
    return total;
  }

  /// Generation-time pixel MSE: for step t the prior pools contexts only from
  /// steps <= t, matching what the temporal model can see.
  std::vector<double> pixel_mse(const Episode2D& ep, int S, Rng rng,
                                int max_targets_per_step = 0) const {
    std::vector<double> acc(ep.T, 0.0);
    std::vector<int> cnt(ep.T, 0);
    for (int s = 0; s < S; ++s) {
      Tape<T> t;
      t.set_grad_enabled(false);
      std::vector<std::pair<int, const Obs2D*>> ctx;
      for (int step = 0; step < ep.T; ++step) {
        for (const Obs2D* o : TgqnModel<T>::step_obs(ep, step, true, false))
          ctx.emplace_back(step, o);
        auto tgts = TgqnModel<T>::step_obs(ep, step, false, true);
        if (max_targets_per_step > 0 && static_cast<int>(tgts.size()) > max_targets_per_step)
          tgts.resize(max_targets_per_step);
        if (tgts.empty()) continue;
        Var rep = pooled_sum(t, ctx, ep.T);
        auto dtr = draw_.prior_rollout(t, rep, rng);
        for (const Obs2D* o : tgts) {
          const auto rt = render_query(t, *o, step, ep.T, dtr.z_full);
          const auto& canvas = t.val(rt.canvas);
          const auto y = tgqn_detail::patch_chw<T>(o->patch, cfg_.image_hw);
          double mse = 0.0;
          for (int i = 0; i < y.numel(); ++i) {
            const double g = std::clamp(static_cast<double>(canvas[i]), 0.0, 1.0);
            mse += (g - y[i]) * (g - y[i]);
          }
          acc[step] += mse / y.numel();
          cnt[step]++;
        }
      }
    }
    std::vector<double> out(ep.T, std::numeric_limits<double>::quiet_NaN());
    for (int step = 0; step < ep.T; ++step)
      if (cnt[step] > 0) out[step] = acc[step] / cnt[step];
    return out;
  }

  SnpModel<double>::ChainSample posterior_chain_sample(const Episode2D& ep, Rng& rng,
                                                       int max_targets_per_step = 0) const {
    Tape<T> t;
    t.set_grad_enabled(false);
    SnpModel<double>::ChainSample cs;
    std::vector<std::pair<int, const Obs2D*>> ctx, full;
    std::vector<std::vector<const Obs2D*>> targets(ep.T);
    for (int step = 0; step < ep.T; ++step) {
      for (const Obs2D* o : TgqnModel<T>::step_obs(ep, step, true, false)) {
        ctx.emplace_back(step, o);
        full.emplace_back(step, o);
      }
      targets[step] = TgqnModel<T>::step_obs(ep, step, false, true);
      if (max_targets_per_step > 0 && static_cast<int>(targets[step].size()) > max_targets_per_step)
        targets[step].resize(max_targets_per_step);
      for (const Obs2D* o : targets[step]) full.emplace_back(step, o);
    }
    auto dtr = draw_.posterior_rollout(t, pooled_sum(t, ctx, ep.T), pooled_sum(t, full, ep.T), rng);
    for (int l = 0; l < cfg_.draw_steps; ++l) {
      cs.logq += normal_logpdf(t.val(dtr.z[l]), t.val(dtr.post[l].mu), t.val(dtr.post[l].sigma));
      cs.logp += normal_logpdf(t.val(dtr.z[l]), t.val(dtr.prior[l].mu), t.val(dtr.prior[l].sigma));
    }
    const T rgb_sigma = static_cast<T>(std::sqrt(cfg_.rgb_var));
    for (int step = 0; step < ep.T; ++step)
      for (const Obs2D* o : targets[step]) {
        const auto rt = render_query(t, *o, step, ep.T, dtr.z_full);
        const auto y = tgqn_detail::patch_chw<T>(o->patch, cfg_.image_hw);
        Tensor<T> sig(t.val(rt.canvas).shape);
        std::fill(sig.data.begin(), sig.data.end(), rgb_sigma);
        cs.loglik += normal_logpdf(y, t.val(rt.canvas), sig);
      }
    return cs;
  }

  static T time_feature(int step, int T_total) {
    return static_cast<T>(static_cast<double>(step) / std::max(1, T_total));
  }

  typename Renderer<T>::Trace render_query(Tape<T>& t, const Obs2D& o, int step, int T_total,
                                           Var z) const {
    const auto q = env2d::normalize_view(o.view_row, o.view_col);
    return renderer_.render(
        t, {static_cast<T>(q[0]), static_cast<T>(q[1]), time_feature(step, T_total)}, z);
  }

 private:
  TgqnConfig cfg_;
  ParamStore<T> ps_;
  TowerEncoder<T> tower_;
  ConvDraw<T> draw_;
  Renderer<T> renderer_;
};

}  // namespace snp
