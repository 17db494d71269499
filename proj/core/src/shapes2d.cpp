#include "snp/shapes2d.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "snp/rng.hpp"

namespace snp::env2d {

namespace {

constexpr double kHalf = kObjectSize / 2.0;                 // 19
constexpr double kLo = kHalf;                               // min feasible center
constexpr double kHi = kCanvasSize - kHalf;                 // max feasible center
constexpr double kTriHeight = 0.86602540378443864676 * kObjectSize;  // side * sqrt(3)/2

double reflect(double x, double lo, double hi, double& v) {
  if (x < lo) {
    x = 2 * lo - x;
    v = -v;
  } else if (x > hi) {
    x = 2 * hi - x;
    v = -v;
  }
  return x;
}

bool inside_shape(const SceneObject& o, double r, double c) {
  const double dr = r - o.row;
  const double dc = c - o.col;
  switch (o.shape) {
    case Shape::square:
      return dr >= -kHalf && dr < kHalf && dc >= -kHalf && dc < kHalf;
    case Shape::circle:
      return dr * dr + dc * dc <= kHalf * kHalf;
    case Shape::triangle: {
      // Upward equilateral, base on the bottom edge of the bounding box,
      // centered horizontally.
      const double base_r = o.row + kHalf;
      const double apex_r = base_r - kTriHeight;
      if (r < apex_r || r > base_r) return false;
      const double halfw = kHalf * (r - apex_r) / kTriHeight;
      return dc >= -halfw && dc <= halfw;
    }
  }
  return false;
}

}  // namespace

std::array<float, 3> color_rgb(Color c) {
  switch (c) {
    case Color::red: return {1.f, 0.f, 0.f};
    case Color::magenta: return {1.f, 0.f, 1.f};
    case Color::blue: return {0.f, 0.f, 1.f};
    case Color::cyan: return {0.f, 1.f, 1.f};
    case Color::green: return {0.f, 1.f, 0.f};
    case Color::yellow: return {1.f, 1.f, 0.f};
  }
  return {0.f, 0.f, 0.f};
}

Color flip_pair(Color c) {
  switch (c) {
    case Color::red: return Color::magenta;
    case Color::magenta: return Color::red;
    case Color::blue: return Color::cyan;
    case Color::cyan: return Color::blue;
    case Color::green: return Color::yellow;
    case Color::yellow: return Color::green;
  }
  return c;
}

int occlusion_rank(Color c) {
  switch (c) {
    case Color::blue: return 0;
    case Color::cyan: return 1;
    case Color::red: return 2;
    case Color::magenta: return 3;
    case Color::green: return 4;
    case Color::yellow: return 5;
  }
  return -1;
}

bool covers(const SceneState& s, int a, int b) {
  const int ra = occlusion_rank(s.objects[a].color);
  const int rb = occlusion_rank(s.objects[b].color);
  if (ra != rb) return ra > rb;
  return a < b;  // same color: object 0 covers object 1
}

SceneState init_scene(uint64_t seed, const Env2dConfig& cfg) {
  Rng rng(seed);
  SceneState s;
  for (auto& o : s.objects) {
    o.shape = static_cast<Shape>(rng.int_range(0, 2));
    o.color = static_cast<Color>(rng.int_range(0, 5));
    o.row = rng.uniform(kLo, kHi);
    o.col = rng.uniform(kLo, kHi);
    const double angle = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
    o.drow = kSpeed * std::sin(angle);
    o.dcol = kSpeed * std::cos(angle);
  }
  for (int i = 0; i < 2; ++i) {
    auto& f = s.flips[i];
    f.active = cfg.episode_T > 2 && rng.bernoulli(cfg.flip_prob);
    if (f.active) {
      f.step = rng.int_range(2, cfg.episode_T - 1);
      f.new_color = flip_pair(s.objects[i].color);
    }
  }
  return s;
}

SceneState step_scene(const SceneState& state, int t) {
  SceneState s = state;
  for (int i = 0; i < 2; ++i) {
    auto& o = s.objects[i];
    o.row = reflect(o.row + o.drow, kLo, kHi, o.drow);
    o.col = reflect(o.col + o.dcol, kLo, kHi, o.dcol);
    if (s.flips[i].active && s.flips[i].step == t) o.color = s.flips[i].new_color;
  }
  return s;
}

Image render_canvas(const SceneState& state) {
  Image img(kCanvasSize, kCanvasSize);
  std::fill(img.rgb.begin(), img.rgb.end(), 1.f);  // white background
  // Painter's order: covered object first.
  const int first = covers(state, 0, 1) ? 1 : 0;
  const int order[2] = {first, 1 - first};
  for (int oi : order) {
    const auto& o = state.objects[oi];
    const auto rgb = color_rgb(o.color);
    const int r0 = std::max(0, static_cast<int>(std::floor(o.row - kHalf)));
    const int r1 = std::min(kCanvasSize - 1, static_cast<int>(std::ceil(o.row + kHalf)));
    const int c0 = std::max(0, static_cast<int>(std::floor(o.col - kHalf)));
    const int c1 = std::min(kCanvasSize - 1, static_cast<int>(std::ceil(o.col + kHalf)));
    for (int r = r0; r <= r1; ++r)
      for (int c = c0; c <= c1; ++c)
        if (inside_shape(o, r + 0.5, c + 0.5)) {  // pixel centers
          float* p = img.px(r, c);
          p[0] = rgb[0];
          p[1] = rgb[1];
          p[2] = rgb[2];
        }
  }
  return img;
}

Obs2D observe(const Image& canvas, double view_row, double view_col) {
  if (view_row < 0 || view_row > canvas.h || view_col < 0 || view_col > canvas.w)
    throw std::domain_error("observe: viewpoint outside the canvas");
  const int half = kPatchSize / 2;
  auto clamp_start = [&](double v, int extent) {
    int s = static_cast<int>(std::lround(v)) - half;
    return std::clamp(s, 0, extent - kPatchSize);
  };
  const int r0 = clamp_start(view_row, canvas.h);
  const int c0 = clamp_start(view_col, canvas.w);
  Obs2D obs;
  obs.view_row = static_cast<float>(view_row);
  obs.view_col = static_cast<float>(view_col);
  obs.patch.resize(static_cast<size_t>(kPatchSize) * kPatchSize * 3);
  for (int r = 0; r < kPatchSize; ++r) {
    const float* src = canvas.px(r0 + r, c0);
    std::copy(src, src + kPatchSize * 3, obs.patch.begin() + static_cast<size_t>(r) * kPatchSize * 3);
  }
  return obs;
}

Episode2D sample_episode2d(Regime2D regime, int T, uint64_t seed, const Env2dConfig& cfg,
                           bool store_canvas) {
  if (T < 1) throw std::invalid_argument("sample_episode2d: T must be >= 1");
  Rng rng(seed);
  Env2dConfig c = cfg;
  c.episode_T = T;
  SceneState scene = init_scene(rng.next_u64(), c);

  Episode2D ep;
  ep.regime = regime;
  ep.T = T;
  ep.seed = seed;
  ep.steps.resize(T);

  constexpr int kObsPerStep = 20;
  for (int t = 1; t <= T; ++t) {
    if (t > 1) scene = step_scene(scene, t);
    const Image canvas = render_canvas(scene);
    auto& step = ep.steps[t - 1];
    int n;
    if (regime == Regime2D::prediction)
      n = t <= 5 ? rng.int_range(1, 5) : 0;
    else
      n = rng.int_range(0, 2);
    const int total = kObsPerStep;
    step.obs.reserve(total);
    step.ctx_mask.assign(total, 0);
    step.tgt_mask.assign(total, 0);
    for (int i = 0; i < total; ++i) {
      const double vr = rng.uniform(0.0, kCanvasSize);
      const double vc = rng.uniform(0.0, kCanvasSize);
      step.obs.push_back(observe(canvas, vr, vc));
      if (i < n)
        step.ctx_mask[i] = 1;
      else
        step.tgt_mask[i] = 1;
    }
    if (store_canvas) step.canvas = canvas.rgb;
  }
  return ep;
}

}  // namespace snp::env2d
