#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace snp {

/// 8-bit RGB raster written as a standard 24-bit BMP.
struct Raster {
  int w = 0, h = 0;
  std::vector<uint8_t> rgb;  // row-major, top-down, 3 bytes per pixel

  Raster() = default;
  Raster(int w_, int h_, uint8_t r = 255, uint8_t g = 255, uint8_t b = 255)
      : w(w_), h(h_), rgb(static_cast<size_t>(w_) * h_ * 3) {
    for (size_t i = 0; i < rgb.size(); i += 3) {
      rgb[i] = r;
      rgb[i + 1] = g;
      rgb[i + 2] = b;
    }
  }

  void set(int x, int y, uint8_t r, uint8_t g, uint8_t b) {
    if (x < 0 || y < 0 || x >= w || y >= h) return;
    uint8_t* p = &rgb[(static_cast<size_t>(y) * w + x) * 3];
    p[0] = r;
    p[1] = g;
    p[2] = b;
  }

  void blend(int x, int y, uint8_t r, uint8_t g, uint8_t b, double a) {
    if (x < 0 || y < 0 || x >= w || y >= h) return;
    uint8_t* p = &rgb[(static_cast<size_t>(y) * w + x) * 3];
    p[0] = static_cast<uint8_t>(p[0] * (1 - a) + r * a);
    p[1] = static_cast<uint8_t>(p[1] * (1 - a) + g * a);
    p[2] = static_cast<uint8_t>(p[2] * (1 - a) + b * a);
  }

  void fill_rect(int x0, int y0, int x1, int y1, uint8_t r, uint8_t g, uint8_t b);
  void line(int x0, int y0, int x1, int y1, uint8_t r, uint8_t g, uint8_t b);
  /// Tiny built-in glyphs: digits, '-', '.', 'e', 'x'. Unknown chars skip.
  void text(int x, int y, const std::string& s, uint8_t r, uint8_t g, uint8_t b);

  /// Copies a channels-last float image in [0,1] (values clamped).
  void paste_float_image(int x, int y, const std::vector<float>& img, int ih, int iw);
};

void write_bmp(const Raster& img, const std::string& path);

}  // namespace snp
