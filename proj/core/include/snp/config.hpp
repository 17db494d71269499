#pragma once

#include <cstdint>
#include <string>

namespace snp {

/// One training/evaluation run. Defaults follow the published hyperparameters:
/// 1D models train with lr 1e-4 / batch 16, scene models with lr 1e-5 /
/// batch 4, posterior-dropout coin probability 0.3.
struct RunConfig {
  std::string model = "snp";  // snp | np | tgqn | gqn
  std::string task = "b";     // a | b | c | prediction | tracking
  int T = 0;                  // 0 = task default (20/20/50 for a/b/c, 20 for 2D)
  double learning_rate = -1;  // -1 = model default
  int batch_size = -1;        // -1 = model default
  int iterations = 2000;
  std::string alpha_schedule = "auto";  // auto | fixed:<iteration> | off
  double pd_prob = 0.3;
  uint64_t seed = 1;
  std::string precision = "f32";  // f32 | f64
  std::string data = "generate";  // "generate" or a directory of episode records
  int train_episodes = 2000;
  int eval_episodes = 200;
  int checkpoint_every = 500;
  int log_every = 25;
  std::string out_dir = "run";
  int threads = 1;
  double clip_norm = 5.0;
  int target_subsample = 0;  // 2D: decoded targets per step during training (0 = all)
  int eval_latent_samples = 20;

  // 1D model dims
  int hidden = 128;
  int zdim = 0;  // latent size; 0 = same as hidden

  // 2D model dims
  int image_hw = 64, latent_hw = 16, rep_depth = 256, conv_hidden = 128, enc_depth = 128,
      z_depth = 4, draw_steps = 6, renderer_iters = 6, z_proj_depth = 108;
  double rgb_var = 2.0;

  bool is_scene_model() const { return model == "tgqn" || model == "gqn"; }
  int task_T() const;
  double lr() const { return learning_rate > 0 ? learning_rate : (is_scene_model() ? 1e-5 : 1e-4); }
  int batch() const { return batch_size > 0 ? batch_size : (is_scene_model() ? 4 : 16); }
  /// alpha at a given iteration under the fixed schedule; `auto` is resolved
  /// by the training loop from the smoothed reconstruction loss.
  void validate() const;
};

/// Flat `key = value` file with '#' comments. Unknown keys are errors.
RunConfig parse_config_file(const std::string& path);
RunConfig parse_config_text(const std::string& text);

/// Inverse of parsing, for run provenance.
std::string config_to_text(const RunConfig& cfg);

}  // namespace snp
