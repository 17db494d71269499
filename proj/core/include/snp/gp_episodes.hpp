#pragma once

#include <cstdint>
#include <vector>

#include "snp/episode.hpp"

namespace snp::gp {

struct GpConfig {
  double noise_std_l = 0.01;      // transition noise on l
  double noise_std_sigma = 0.02;  // transition noise on sigma
  bool transition_noise = true;
  double floor_l = 0.1;
  double floor_sigma = 0.1;
  double x_lo = -2.0;  // query domain
  double x_hi = 2.0;
  double jitter0 = 1e-6;     // initial Cholesky jitter, relative to sigma^2
  double jitter_max = 1e-2;  // escalation cap, relative to sigma^2
};

/// Per-step context/target sizes for one episode.
struct ContextSchedule {
  int T = 0;
  std::vector<uint8_t> present;  // context provided at this step
  std::vector<int> n;            // context sizes
  std::vector<int> m;            // target sizes
};

/// k(x1, x2) = sigma^2 * exp(-(x1-x2)^2 / (2 l^2)). Throws std::domain_error
/// for non-positive l.
double se_kernel(double x1, double x2, const KernelState& state);

/// One joint draw from N(0, K + eps*I) on the grid. Deterministic given seed.
/// Jitter escalates from jitter0 to jitter_max (times sigma^2) before the
/// draw fails with the attempted jitter in the message.
std::vector<double> gp_draw(const std::vector<double>& xgrid, const KernelState& state,
                            uint64_t seed, const GpConfig& cfg = {});

/// l <- clamp(l + dl + eta_l), sigma <- clamp(sigma + dsigma + eta_sigma).
KernelState transition_state(const KernelState& state, uint64_t seed, const GpConfig& cfg = {});

/// Context regimes of the three tasks:
///   a: T=20, context in steps 1..10
///   b: T=20, context in 10 uniformly chosen steps
///   c: T=50, context (single point) in 45 uniformly chosen steps
ContextSchedule sample_schedule(char task, uint64_t seed);

/// Full episode: initial kernel draw, per-step transitions, one joint GP draw
/// per step over the union of context and target locations.
Episode1D sample_episode(char task, uint64_t seed, const GpConfig& cfg = {});

/// Initial hyperparameter ranges per task.
struct TaskRanges {
  double l_lo, l_hi, sigma_lo, sigma_hi;
};
TaskRanges task_ranges(char task);

}  // namespace snp::gp
