#include "snp/gp_episodes.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

#include "snp/rng.hpp"

namespace snp::gp {

double se_kernel(double x1, double x2, const KernelState& state) {
  if (state.l <= 0.0) throw std::domain_error("se_kernel: non-positive length-scale");
  const double d = x1 - x2;
  return state.sigma * state.sigma * std::exp(-d * d / (2.0 * state.l * state.l));
}

namespace {

// In-place lower Cholesky; returns false on a non-positive pivot.
bool cholesky(std::vector<double>& a, int n) {
  for (int j = 0; j < n; ++j) {
    double d = a[j * n + j];
    for (int k = 0; k < j; ++k) d -= a[j * n + k] * a[j * n + k];
    if (d <= 0.0 || !std::isfinite(d)) return false;
    const double lj = std::sqrt(d);
    a[j * n + j] = lj;
    for (int i = j + 1; i < n; ++i) {
      double s = a[i * n + j];
      for (int k = 0; k < j; ++k) s -= a[i * n + k] * a[j * n + k];
      a[i * n + j] = s / lj;
    }
  }
  return true;
}

}  // namespace

std::vector<double> gp_draw(const std::vector<double>& xgrid, const KernelState& state,
                            uint64_t seed, const GpConfig& cfg) {
  const int n = static_cast<int>(xgrid.size());
  if (n == 0) throw std::invalid_argument("gp_draw: empty grid");
  for (double x : xgrid)
    if (!std::isfinite(x)) throw std::invalid_argument("gp_draw: non-finite grid point");

  std::vector<double> base(static_cast<size_t>(n) * n);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j <= i; ++j) {
      const double k = se_kernel(xgrid[i], xgrid[j], state);
      base[i * n + j] = k;
      base[j * n + i] = k;
    }

  const double s2 = state.sigma * state.sigma;
  std::vector<double> chol;
  double jitter = cfg.jitter0 * s2;
  bool ok = false;
  for (; jitter <= cfg.jitter_max * s2 * (1.0 + 1e-12); jitter *= 10.0) {
    chol = base;
    for (int i = 0; i < n; ++i) chol[i * n + i] += jitter;
    if (cholesky(chol, n)) {
      ok = true;
      break;
    }
  }
  if (!ok)
    throw std::runtime_error("gp_draw: Cholesky failed, last attempted jitter " +
                             std::to_string(cfg.jitter_max * s2));

  Rng rng(seed);
  std::vector<double> eta(n);
  for (auto& e : eta) e = rng.normal();
  std::vector<double> y(n, 0.0);
  for (int i = 0; i < n; ++i) {
    double acc = 0.0;
    for (int j = 0; j <= i; ++j) acc += chol[i * n + j] * eta[j];
    y[i] = acc;
  }
  return y;
}

KernelState transition_state(const KernelState& state, uint64_t seed, const GpConfig& cfg) {
  Rng rng(seed);
  double eta_l = 0.0, eta_s = 0.0;
  if (cfg.transition_noise) {
    eta_l = rng.normal(0.0, cfg.noise_std_l);
    eta_s = rng.normal(0.0, cfg.noise_std_sigma);
  }
  KernelState out = state;
  out.l = std::max(cfg.floor_l, state.l + state.dl + eta_l);
  out.sigma = std::max(cfg.floor_sigma, state.sigma + state.dsigma + eta_s);
  return out;
}

TaskRanges task_ranges(char task) {
  switch (task) {
    case 'a':
    case 'b':
      return {0.7, 1.2, 1.0, 1.6};
    case 'c':
      return {1.2, 1.9, 1.6, 3.1};
    default:
      throw std::invalid_argument(std::string("unknown task '") + task + "'");
  }
}

ContextSchedule sample_schedule(char task, uint64_t seed) {
  if (task != 'a' && task != 'b' && task != 'c')
    throw std::invalid_argument(std::string("unknown task '") + task + "'");
  Rng rng(seed);
  ContextSchedule sch;
  sch.T = task == 'c' ? 50 : 20;
  sch.present.assign(sch.T, 0);
  if (task == 'a') {
    for (int t = 0; t < 10; ++t) sch.present[t] = 1;
  } else {
    const int k = task == 'b' ? 10 : 45;
    for (int idx : rng.sample_without_replacement(sch.T, k)) sch.present[idx] = 1;
  }
  sch.n.resize(sch.T);
  sch.m.resize(sch.T);
  for (int t = 0; t < sch.T; ++t) {
    if (task == 'c') {
      sch.n[t] = sch.present[t] ? 1 : 0;
      sch.m[t] = rng.int_range(0, 10 - sch.n[t]);
    } else {
      sch.n[t] = sch.present[t] ? rng.int_range(5, 50) : 0;
      sch.m[t] = rng.int_range(0, 50 - sch.n[t]);
    }
  }
  return sch;
}

Episode1D sample_episode(char task, uint64_t seed, const GpConfig& cfg) {
  const TaskRanges r = task_ranges(task);
  Rng rng(seed);
  const ContextSchedule sch = sample_schedule(task, rng.next_u64());

  KernelState state;
  state.l = rng.uniform(r.l_lo, r.l_hi);
  state.sigma = rng.uniform(r.sigma_lo, r.sigma_hi);
  state.dl = rng.uniform(-0.03, 0.03);
  state.dsigma = rng.uniform(-0.05, 0.05);

  Episode1D ep;
  ep.task = task;
  ep.T = sch.T;
  ep.seed = seed;
  ep.steps.resize(sch.T);
  ep.kernel_trace.reserve(sch.T);

  for (int t = 0; t < sch.T; ++t) {
    if (t > 0) state = transition_state(state, rng.next_u64(), cfg);
    ep.kernel_trace.push_back(state);
    const int total = sch.n[t] + sch.m[t];
    auto& step = ep.steps[t];
    if (total == 0) continue;
    std::vector<double> xs(total);
    for (auto& x : xs) x = rng.uniform(cfg.x_lo, cfg.x_hi);
    const std::vector<double> ys = gp_draw(xs, state, rng.next_u64(), cfg);
    step.x.resize(total);
    step.y.resize(total);
    step.ctx_mask.assign(total, 0);
    step.tgt_mask.assign(total, 0);
    for (int i = 0; i < total; ++i) {
      step.x[i] = static_cast<float>(xs[i]);
      step.y[i] = static_cast<float>(ys[i]);
      if (i < sch.n[t])
        step.ctx_mask[i] = 1;
      else
        step.tgt_mask[i] = 1;
    }
  }
  return ep;
}

}  // namespace snp::gp
