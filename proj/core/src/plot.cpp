#include "snp/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <stdexcept>

namespace snp {

namespace {

constexpr uint8_t kPalette[][3] = {
    {31, 119, 180}, {255, 127, 14}, {44, 160, 44},  {214, 39, 40},
    {148, 103, 189}, {140, 86, 75}, {227, 119, 194}, {127, 127, 127},
};

std::string fmt_tick(double v) {
  char buf[32];
  if (v == 0)
    snprintf(buf, sizeof(buf), "0");
  else if (std::fabs(v) >= 0.01 && std::fabs(v) < 10000)
    snprintf(buf, sizeof(buf), "%.4g", v);
  else
    snprintf(buf, sizeof(buf), "%.1e", v);
  return buf;
}

struct Axes {
  int x0, y0, x1, y1;  // plot area in raster coords (y grows down)
  double xmin, xmax, ymin, ymax;

  int px(double x) const {
    return x0 + static_cast<int>(std::lround((x - xmin) / (xmax - xmin) * (x1 - x0)));
  }
  int py(double y) const {
    return y1 - static_cast<int>(std::lround((y - ymin) / (ymax - ymin) * (y1 - y0)));
  }
};

Axes make_axes(Raster& img, double xmin, double xmax, double ymin, double ymax) {
  if (!(xmax > xmin)) xmax = xmin + 1;
  if (!(ymax > ymin)) {
    ymax = ymin + 1;
    ymin -= 1;
  }
  const double ypad = 0.05 * (ymax - ymin);
  Axes ax{48, 12, img.w - 12, img.h - 24, xmin, xmax, ymin - ypad, ymax + ypad};
  img.line(ax.x0, ax.y0, ax.x0, ax.y1, 0, 0, 0);
  img.line(ax.x0, ax.y1, ax.x1, ax.y1, 0, 0, 0);
  for (int i = 0; i <= 4; ++i) {
    const double xv = ax.xmin + (ax.xmax - ax.xmin) * i / 4;
    const double yv = ax.ymin + (ax.ymax - ax.ymin) * i / 4;
    img.line(ax.px(xv), ax.y1, ax.px(xv), ax.y1 + 3, 0, 0, 0);
    img.text(ax.px(xv) - 8, ax.y1 + 6, fmt_tick(xv), 0, 0, 0);
    img.line(ax.x0 - 3, ax.py(yv), ax.x0, ax.py(yv), 0, 0, 0);
    img.text(2, ax.py(yv) - 2, fmt_tick(yv), 0, 0, 0);
  }
  return ax;
}

}  // namespace

void plot_curves(const std::vector<std::pair<std::string, std::vector<double>>>& series,
                 const std::string& out_path) {
  if (series.empty()) throw std::invalid_argument("plot_curves: no series given");
  size_t n = 0;
  double ymin = std::numeric_limits<double>::infinity(), ymax = -ymin;
  bool any = false;
  for (const auto& [name, ys] : series) {
    n = std::max(n, ys.size());
    for (double y : ys)
      if (std::isfinite(y)) {
        ymin = std::min(ymin, y);
        ymax = std::max(ymax, y);
        any = true;
      }
  }
  if (!any || n == 0) throw std::invalid_argument("plot_curves: series contain no finite values");

  Raster img(640, 400);
  Axes ax = make_axes(img, 0, static_cast<double>(n - 1), ymin, ymax);
  for (size_t s = 0; s < series.size(); ++s) {
    const auto& ys = series[s].second;
    const auto* c = kPalette[s % (sizeof(kPalette) / sizeof(kPalette[0]))];
    int prev_x = 0, prev_y = 0;
    bool have_prev = false;
    for (size_t i = 0; i < ys.size(); ++i) {
      if (!std::isfinite(ys[i])) {
        have_prev = false;
        continue;
      }
      const int x = ax.px(static_cast<double>(i));
      const int y = ax.py(ys[i]);
      if (have_prev) img.line(prev_x, prev_y, x, y, c[0], c[1], c[2]);
      img.fill_rect(x - 1, y - 1, x + 1, y + 1, c[0], c[1], c[2]);
      prev_x = x;
      prev_y = y;
      have_prev = true;
    }
    // Legend swatch + index number.
    const int ly = 16 + static_cast<int>(s) * 10;
    img.fill_rect(ax.x1 - 60, ly, ax.x1 - 48, ly + 6, c[0], c[1], c[2]);
    img.text(ax.x1 - 44, ly, std::to_string(s), 0, 0, 0);
  }
  write_bmp(img, out_path);
}

void plot_1d(const Plot1dLayers& layers, const std::string& out_path) {
  if (layers.xgrid.size() != layers.mean.size() || layers.mean.size() != layers.band.size())
    throw std::invalid_argument("plot_1d: grid/mean/band size mismatch");
  double xmin = -2, xmax = 2, ymin = -3, ymax = 3;
  auto stretch = [&](double x, double y) {
    xmin = std::min(xmin, x);
    xmax = std::max(xmax, x);
    if (std::isfinite(y)) {
      ymin = std::min(ymin, y);
      ymax = std::max(ymax, y);
    }
  };
  for (size_t i = 0; i < layers.xgrid.size(); ++i) {
    stretch(layers.xgrid[i], layers.mean[i] - 2 * layers.band[i]);
    stretch(layers.xgrid[i], layers.mean[i] + 2 * layers.band[i]);
  }
  for (const auto& [x, y] : layers.truth) stretch(x, y);
  for (const auto& [x, y] : layers.past_context) stretch(x, y);
  for (const auto& [x, y] : layers.current_context) stretch(x, y);

  Raster img(640, 400);
  Axes ax = make_axes(img, xmin, xmax, ymin, ymax);

  // Band: +-2 std shaded light blue.
  for (size_t i = 0; i + 1 < layers.xgrid.size(); ++i) {
    const int xa = ax.px(layers.xgrid[i]);
    const int xb = ax.px(layers.xgrid[i + 1]);
    for (int x = xa; x <= xb; ++x) {
      const double f = xb > xa ? static_cast<double>(x - xa) / (xb - xa) : 0.0;
      const double m = layers.mean[i] * (1 - f) + layers.mean[i + 1] * f;
      const double s = layers.band[i] * (1 - f) + layers.band[i + 1] * f;
      const int ya = ax.py(m + 2 * s), yb = ax.py(m - 2 * s);
      for (int y = std::min(ya, yb); y <= std::max(ya, yb); ++y) img.blend(x, y, 120, 170, 255, 0.45);
    }
  }
  // Mean: solid blue.
  for (size_t i = 0; i + 1 < layers.xgrid.size(); ++i)
    img.line(ax.px(layers.xgrid[i]), ax.py(layers.mean[i]), ax.px(layers.xgrid[i + 1]),
             ax.py(layers.mean[i + 1]), 20, 80, 220);
  // Truth: black dotted segments over x-sorted points.
  auto truth = layers.truth;
  std::sort(truth.begin(), truth.end());
  for (size_t i = 0; i + 1 < truth.size(); ++i) {
    const int xa = ax.px(truth[i].first), ya = ax.py(truth[i].second);
    const int xb = ax.px(truth[i + 1].first), yb = ax.py(truth[i + 1].second);
    const int steps = std::max(std::abs(xb - xa), std::abs(yb - ya));
    for (int s = 0; s <= steps; s += 3)
      img.set(xa + (xb - xa) * s / std::max(1, steps), ya + (yb - ya) * s / std::max(1, steps), 0,
              0, 0);
  }
  // Context dots: past blue, current black.
  for (const auto& [x, y] : layers.past_context)
    img.fill_rect(ax.px(x) - 2, ax.py(y) - 2, ax.px(x) + 2, ax.py(y) + 2, 30, 90, 230);
  for (const auto& [x, y] : layers.current_context)
    img.fill_rect(ax.px(x) - 2, ax.py(y) - 2, ax.px(x) + 2, ax.py(y) + 2, 0, 0, 0);

  write_bmp(img, out_path);
}

void plot_image_grid(const std::vector<std::vector<std::vector<float>>>& rows, int hw,
                     const std::string& out_path) {
  if (rows.empty() || rows[0].empty()) throw std::invalid_argument("plot_image_grid: empty grid");
  size_t cols = 0;
  for (const auto& r : rows) cols = std::max(cols, r.size());
  const int pad = 2;
  Raster img(static_cast<int>(cols) * (hw + pad) + pad,
             static_cast<int>(rows.size()) * (hw + pad) + pad, 40, 40, 40);
  for (size_t r = 0; r < rows.size(); ++r)
    for (size_t c = 0; c < rows[r].size(); ++c)
      if (!rows[r][c].empty())
        img.paste_float_image(static_cast<int>(c) * (hw + pad) + pad,
                              static_cast<int>(r) * (hw + pad) + pad, rows[r][c], hw, hw);
  write_bmp(img, out_path);
}

}  // namespace snp
