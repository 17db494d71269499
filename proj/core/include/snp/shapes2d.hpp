#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "snp/episode.hpp"

namespace snp::env2d {

enum class Shape : uint8_t { triangle = 0, square = 1, circle = 2 };
enum class Color : uint8_t { red = 0, magenta = 1, blue = 2, cyan = 3, green = 4, yellow = 5 };

constexpr double kSpeed = 13.0;  // pixels per step, preserved by bounces

struct SceneObject {
  Shape shape = Shape::square;
  Color color = Color::red;
  double row = 0, col = 0;    // object center, canvas pixels
  double drow = 0, dcol = 0;  // velocity, magnitude kSpeed
};

struct FlipEvent {
  bool active = false;
  int step = 0;  // 1-based step at which the color changes
  Color new_color = Color::red;
};

struct SceneState {
  std::array<SceneObject, 2> objects;
  std::array<FlipEvent, 2> flips;
};

struct Env2dConfig {
  double flip_prob = 0.5;  // per object, one flip per episode
  int episode_T = 20;      // horizon the flip step is drawn against
};

/// Row-major channels-last RGB image with values in [0,1].
struct Image {
  int h = 0, w = 0;
  std::vector<float> rgb;

  Image() = default;
  Image(int h_, int w_) : h(h_), w(w_), rgb(static_cast<size_t>(h_) * w_ * 3, 0.f) {}
  float* px(int r, int c) { return rgb.data() + (static_cast<size_t>(r) * w + c) * 3; }
  const float* px(int r, int c) const { return rgb.data() + (static_cast<size_t>(r) * w + c) * 3; }
};

std::array<float, 3> color_rgb(Color c);

/// Flip pairing: red<->magenta, blue<->cyan, green<->yellow.
Color flip_pair(Color c);

/// Occlusion precedence: higher rank covers lower. Total order consistent
/// with the published pair rules (yellow > green > magenta > red > cyan > blue).
int occlusion_rank(Color c);

/// True when object a covers object b on overlap (same color: object 0 wins).
bool covers(const SceneState& s, int a, int b);

/// Two objects with uniform shape/color, uniform inward position, random
/// direction at speed 13, plus a per-object optional color-flip event.
SceneState init_scene(uint64_t seed, const Env2dConfig& cfg = {});

/// Moving-MNIST bounce: advance by velocity, mirror overshoot back inside,
/// reflect the offending velocity component. Fires a scheduled flip at step t.
SceneState step_scene(const SceneState& state, int t);

Image render_canvas(const SceneState& state);

/// 64x64 crop centered (after edge clamping) at the viewpoint. Throws
/// std::domain_error for out-of-canvas viewpoints.
Obs2D observe(const Image& canvas, double view_row, double view_col);

/// Viewpoint pixels -> model query in [-1,1]^2.
inline std::array<float, 2> normalize_view(float r, float c) {
  return {static_cast<float>(2.0 * r / kCanvasSize - 1.0),
          static_cast<float>(2.0 * c / kCanvasSize - 1.0)};
}

/// Rolls the scene T steps and draws per-step observations: prediction gives
/// n in [1,5] contexts in the first 5 steps only; tracking gives n in [0,2]
/// everywhere. Total observations per step is 20.
Episode2D sample_episode2d(Regime2D regime, int T, uint64_t seed, const Env2dConfig& cfg = {},
                           bool store_canvas = false);

}  // namespace snp::env2d
