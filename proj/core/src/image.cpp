#include "snp/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace snp {

void Raster::fill_rect(int x0, int y0, int x1, int y1, uint8_t r, uint8_t g, uint8_t b) {
  for (int y = std::max(0, y0); y <= std::min(h - 1, y1); ++y)
    for (int x = std::max(0, x0); x <= std::min(w - 1, x1); ++x) set(x, y, r, g, b);
}

void Raster::line(int x0, int y0, int x1, int y1, uint8_t r, uint8_t g, uint8_t b) {
  const int dx = std::abs(x1 - x0), dy = -std::abs(y1 - y0);
  const int sx = x0 < x1 ? 1 : -1, sy = y0 < y1 ? 1 : -1;
  int err = dx + dy;
  while (true) {
    set(x0, y0, r, g, b);
    if (x0 == x1 && y0 == y1) break;
    const int e2 = 2 * err;
    if (e2 >= dy) {
      err += dy;
      x0 += sx;
    }
    if (e2 <= dx) {
      err += dx;
      y0 += sy;
    }
  }
}

namespace {

// 3x5 glyphs, row-major bits (msb = left column).
struct Glyph {
  char c;
  uint8_t rows[5];
};
constexpr Glyph kGlyphs[] = {
    {'0', {0b111, 0b101, 0b101, 0b101, 0b111}}, {'1', {0b010, 0b110, 0b010, 0b010, 0b111}},
    {'2', {0b111, 0b001, 0b111, 0b100, 0b111}}, {'3', {0b111, 0b001, 0b111, 0b001, 0b111}},
    {'4', {0b101, 0b101, 0b111, 0b001, 0b001}}, {'5', {0b111, 0b100, 0b111, 0b001, 0b111}},
    {'6', {0b111, 0b100, 0b111, 0b101, 0b111}}, {'7', {0b111, 0b001, 0b010, 0b010, 0b010}},
    {'8', {0b111, 0b101, 0b111, 0b101, 0b111}}, {'9', {0b111, 0b101, 0b111, 0b001, 0b111}},
    {'-', {0b000, 0b000, 0b111, 0b000, 0b000}}, {'.', {0b000, 0b000, 0b000, 0b000, 0b010}},
    {'e', {0b000, 0b111, 0b110, 0b100, 0b111}}, {'x', {0b000, 0b101, 0b010, 0b101, 0b000}},
    {'+', {0b000, 0b010, 0b111, 0b010, 0b000}},
};

}  // namespace

void Raster::text(int x, int y, const std::string& s, uint8_t r, uint8_t g, uint8_t b) {
  int cx = x;
  for (char c : s) {
    for (const auto& gl : kGlyphs) {
      if (gl.c != c) continue;
      for (int row = 0; row < 5; ++row)
        for (int col = 0; col < 3; ++col)
          if (gl.rows[row] & (0b100 >> col)) set(cx + col, y + row, r, g, b);
      break;
    }
    cx += 4;
  }
}

void Raster::paste_float_image(int x, int y, const std::vector<float>& img, int ih, int iw) {
  if (img.size() != static_cast<size_t>(ih) * iw * 3)
    throw std::invalid_argument("paste_float_image: size mismatch");
  for (int r = 0; r < ih; ++r)
    for (int c = 0; c < iw; ++c) {
      const float* p = &img[(static_cast<size_t>(r) * iw + c) * 3];
      auto q = [](float v) {
        return static_cast<uint8_t>(std::lround(std::clamp(v, 0.f, 1.f) * 255.f));
      };
      set(x + c, y + r, q(p[0]), q(p[1]), q(p[2]));
    }
}

void write_bmp(const Raster& img, const std::string& path) {
  if (img.w <= 0 || img.h <= 0) throw std::invalid_argument("write_bmp: empty image");
  const int row_bytes = img.w * 3;
  const int padded = (row_bytes + 3) & ~3;
  const uint32_t data_size = static_cast<uint32_t>(padded) * img.h;
  const uint32_t file_size = 54 + data_size;
  uint8_t header[54] = {};
  header[0] = 'B';
  header[1] = 'M';
  std::memcpy(header + 2, &file_size, 4);
  const uint32_t off = 54;
  std::memcpy(header + 10, &off, 4);
  const uint32_t info = 40;
  std::memcpy(header + 14, &info, 4);
  std::memcpy(header + 18, &img.w, 4);
  std::memcpy(header + 22, &img.h, 4);
  const uint16_t planes = 1, bpp = 24;
  std::memcpy(header + 26, &planes, 2);
  std::memcpy(header + 28, &bpp, 2);
  std::memcpy(header + 34, &data_size, 4);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("write_bmp: cannot open " + path);
  out.write(reinterpret_cast<const char*>(header), sizeof(header));
  std::vector<uint8_t> row(padded, 0);
  for (int y = img.h - 1; y >= 0; --y) {  // BMP stores bottom-up, BGR
    for (int x = 0; x < img.w; ++x) {
      const uint8_t* p = &img.rgb[(static_cast<size_t>(y) * img.w + x) * 3];
      row[x * 3] = p[2];
      row[x * 3 + 1] = p[1];
      row[x * 3 + 2] = p[0];
    }
    out.write(reinterpret_cast<const char*>(row.data()), padded);
  }
  if (!out) throw std::runtime_error("write_bmp: write failed " + path);
}

}  // namespace snp
