#pragma once

#include <cstdint>
#include <vector>

namespace snp {

/// Squared-exponential kernel hyperparameters and their per-step linear
/// drifts. The latent dynamics of the 1D regression tasks.
struct KernelState {
  double l = 1.0;       // length-scale, > 0
  double sigma = 1.0;   // kernel scale, > 0
  double dl = 0.0;      // per-step length-scale drift
  double dsigma = 0.0;  // per-step kernel-scale drift
};

struct Step1D {
  std::vector<float> x, y;
  std::vector<uint8_t> ctx_mask, tgt_mask;  // disjoint, one flag per point

  int n_context() const {
    int n = 0;
    for (auto m : ctx_mask) n += m;
    return n;
  }
  int n_target() const {
    int n = 0;
    for (auto m : tgt_mask) n += m;
    return n;
  }
};

/// One sequence of 1D regression tasks. Steps are 1-based in the task
/// definitions; steps[i] holds step i+1. kernel_trace is ground truth kept
/// for diagnostics only, never shown to models.
struct Episode1D {
  char task = 'a';  // a | b | c
  int T = 0;
  uint64_t seed = 0;
  std::vector<Step1D> steps;
  std::vector<KernelState> kernel_trace;
};

constexpr int kCanvasSize = 130;
constexpr int kObjectSize = 38;
constexpr int kPatchSize = 64;

/// One cropped view of the canvas. The viewpoint is in canvas pixel
/// coordinates; the patch is row-major, channels-last, values in [0,1].
struct Obs2D {
  float view_row = 0, view_col = 0;
  std::vector<float> patch;  // kPatchSize * kPatchSize * 3
};

struct Step2D {
  std::vector<Obs2D> obs;
  std::vector<uint8_t> ctx_mask, tgt_mask;
  std::vector<float> canvas;  // optional full render (row-major, channels-last)

  int n_context() const {
    int n = 0;
    for (auto m : ctx_mask) n += m;
    return n;
  }
  int n_target() const {
    int n = 0;
    for (auto m : tgt_mask) n += m;
    return n;
  }
};

enum class Regime2D : uint8_t { prediction = 0, tracking = 1 };

struct Episode2D {
  Regime2D regime = Regime2D::prediction;
  int T = 0;
  uint64_t seed = 0;
  std::vector<Step2D> steps;
};

}  // namespace snp
