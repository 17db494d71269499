#pragma once

#include <cstdint>
#include <string>

#include "snp/config.hpp"
#include "snp/snp_model.hpp"
#include "snp/tgqn.hpp"

namespace snp {

/// Deterministic per-purpose seed streams derived from the run seed.
inline uint64_t derive_seed(uint64_t base, uint64_t stream, uint64_t index) {
  uint64_t x = base ^ (0x9e3779b97f4a7c15ull * (stream + 1));
  x ^= x >> 30;
  x *= 0xbf58476d1ce4e5b9ull;
  x ^= x >> 27;
  x += index * 0x94d049bb133111ebull;
  x ^= x >> 31;
  return x ? x : 1;
}

constexpr uint64_t kStreamTrainData = 1;
constexpr uint64_t kStreamEvalData = 2;
constexpr uint64_t kStreamBatchOrder = 3;
constexpr uint64_t kStreamIteration = 4;
constexpr uint64_t kStreamModelInit = 5;

struct TrainOutputs {
  int64_t final_iteration = 0;
  std::string metrics_path;
  std::string checkpoint_path;  // last checkpoint written
};

/// Runs the configured training loop: minibatch gradient accumulation,
/// Adam, the alpha schedule for L_SNP + alpha * L_PD, periodic checkpoints
/// and metric logging. Fully reproducible given the config (including
/// thread count). A non-finite loss aborts, keeping the last checkpoint.
TrainOutputs run_training(const RunConfig& cfg, bool resume = false);

template <class T>
Snp1dConfig snp_config_from(const RunConfig& c) {
  Snp1dConfig m;
  m.hidden = c.hidden;
  m.zdim = c.zdim > 0 ? c.zdim : c.hidden;
  m.rdim = c.hidden;
  m.sdim = c.hidden;
  m.init_seed = derive_seed(c.seed, kStreamModelInit, 0);
  return m;
}

template <class T>
TgqnConfig tgqn_config_from(const RunConfig& c) {
  TgqnConfig m;
  m.image_hw = c.image_hw;
  m.latent_hw = c.latent_hw;
  m.rep_depth = c.rep_depth;
  m.hidden = c.conv_hidden;
  m.enc_depth = c.enc_depth;
  m.z_depth = c.z_depth;
  m.draw_steps = c.draw_steps;
  m.renderer_iters = c.renderer_iters;
  m.z_proj_depth = c.z_proj_depth;
  m.rgb_var = c.rgb_var;
  m.init_seed = derive_seed(c.seed, kStreamModelInit, 0);
  return m;
}

/// Training episode for index i (generated on the fly; deterministic).
Episode1D train_episode_1d(const RunConfig& cfg, int index);
Episode2D train_episode_2d(const RunConfig& cfg, int index);
Episode1D eval_episode_1d(const RunConfig& cfg, int index);
Episode2D eval_episode_2d(const RunConfig& cfg, int index);

}  // namespace snp
