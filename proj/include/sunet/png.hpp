#pragma once

// Tiny PNG writer (8-bit RGB, zlib-compressed, filter 0) plus a pixel canvas
// with a 5x7 bitmap font — just enough to draw labelled charts.

#include <zlib.h>

#include <cstdint>
#include <fstream>

#include "core.hpp"

namespace sunet {

struct Rgb {
  uint8_t r = 0, g = 0, b = 0;
};

namespace png_detail {

// 5x7 glyphs, one byte per row, low 5 bits used (MSB = leftmost column)
inline const uint8_t* glyph(char c) {
  static const uint8_t kSpace[7] = {0, 0, 0, 0, 0, 0, 0};
  static const uint8_t kDigits[10][7] = {
      {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}, {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E},
      {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F}, {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E},
      {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}, {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E},
      {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}, {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08},
      {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}, {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C}};
  static const uint8_t kAlpha[26][7] = {
      {0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}, {0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E},
      {0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E}, {0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C},
      {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F}, {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10},
      {0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F}, {0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11},
      {0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E}, {0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C},
      {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11}, {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F},
      {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11}, {0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11},
      {0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}, {0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10},
      {0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D}, {0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11},
      {0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E}, {0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04},
      {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}, {0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04},
      {0x11, 0x11, 0x11, 0x15, 0x15, 0x1B, 0x11}, {0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11},
      {0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04}, {0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F}};
  static const uint8_t kDot[7] = {0, 0, 0, 0, 0, 0x0C, 0x0C};
  static const uint8_t kComma[7] = {0, 0, 0, 0, 0x0C, 0x04, 0x08};
  static const uint8_t kMinus[7] = {0, 0, 0, 0x1F, 0, 0, 0};
  static const uint8_t kPlus[7] = {0, 0x04, 0x04, 0x1F, 0x04, 0x04, 0};
  static const uint8_t kUnder[7] = {0, 0, 0, 0, 0, 0, 0x1F};
  static const uint8_t kColon[7] = {0, 0x0C, 0x0C, 0, 0x0C, 0x0C, 0};
  static const uint8_t kSlash[7] = {0x01, 0x01, 0x02, 0x04, 0x08, 0x10, 0x10};
  static const uint8_t kPct[7] = {0x19, 0x19, 0x02, 0x04, 0x08, 0x13, 0x13};
  static const uint8_t kLPar[7] = {0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02};
  static const uint8_t kRPar[7] = {0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08};
  static const uint8_t kEq[7] = {0, 0, 0x1F, 0, 0x1F, 0, 0};
  static const uint8_t kQm[7] = {0x0E, 0x11, 0x01, 0x02, 0x04, 0, 0x04};

  if (c >= 'a' && c <= 'z') c = char(c - 'a' + 'A');
  if (c >= '0' && c <= '9') return kDigits[c - '0'];
  if (c >= 'A' && c <= 'Z') return kAlpha[c - 'A'];
  switch (c) {
    case '.': return kDot;
    case ',': return kComma;
    case '-': return kMinus;
    case '+': return kPlus;
    case '_': return kUnder;
    case ':': return kColon;
    case '/': return kSlash;
    case '%': return kPct;
    case '(': return kLPar;
    case ')': return kRPar;
    case '=': return kEq;
    case ' ': return kSpace;
    default: return kQm;
  }
}

inline void put_be32(std::string& s, uint32_t v) {
  s.push_back(char(v >> 24));
  s.push_back(char((v >> 16) & 0xff));
  s.push_back(char((v >> 8) & 0xff));
  s.push_back(char(v & 0xff));
}

inline void chunk(std::ofstream& f, const char type[4], const std::string& data) {
  std::string head;
  put_be32(head, uint32_t(data.size()));
  head.append(type, 4);
  f.write(head.data(), std::streamsize(head.size()));
  f.write(data.data(), std::streamsize(data.size()));
  uint32_t crc = uint32_t(crc32(0L, nullptr, 0));
  crc = uint32_t(crc32(crc, reinterpret_cast<const Bytef*>(type), 4));
  crc = uint32_t(
      crc32(crc, reinterpret_cast<const Bytef*>(data.data()), uInt(data.size())));
  std::string tail;
  put_be32(tail, crc);
  f.write(tail.data(), std::streamsize(tail.size()));
}

}  // namespace png_detail

struct Canvas {
  int w = 0, h = 0;
  std::vector<uint8_t> px;  // rgb, row-major

  Canvas(int width, int height, Rgb bg = {255, 255, 255}) : w(width), h(height) {
    require(width > 0 && height > 0, "canvas: bad size");
    px.resize(size_t(w) * size_t(h) * 3);
    for (int64_t i = 0; i < int64_t(w) * h; ++i) {
      px[size_t(i * 3)] = bg.r;
      px[size_t(i * 3 + 1)] = bg.g;
      px[size_t(i * 3 + 2)] = bg.b;
    }
  }

  void set(int x, int y, Rgb c) {
    if (x < 0 || y < 0 || x >= w || y >= h) return;
    const size_t i = (size_t(y) * size_t(w) + size_t(x)) * 3;
    px[i] = c.r;
    px[i + 1] = c.g;
    px[i + 2] = c.b;
  }

  void fill_rect(int x0, int y0, int x1, int y1, Rgb c) {
    for (int y = std::min(y0, y1); y <= std::max(y0, y1); ++y)
      for (int x = std::min(x0, x1); x <= std::max(x0, x1); ++x) set(x, y, c);
  }

  void hline(int x0, int x1, int y, Rgb c) { fill_rect(x0, y, x1, y, c); }
  void vline(int x, int y0, int y1, Rgb c) { fill_rect(x, y0, x, y1, c); }

  void text(int x, int y, const std::string& s, Rgb c, int scale = 1) {
    int cx = x;
    for (char ch : s) {
      const uint8_t* g = png_detail::glyph(ch);
      for (int row = 0; row < 7; ++row)
        for (int col = 0; col < 5; ++col)
          if (g[row] & (1 << (4 - col)))
            for (int sy = 0; sy < scale; ++sy)
              for (int sx = 0; sx < scale; ++sx)
                set(cx + col * scale + sx, y + row * scale + sy, c);
      cx += 6 * scale;
    }
  }

  static int text_width(const std::string& s, int scale = 1) {
    return int(s.size()) * 6 * scale - (s.empty() ? 0 : scale);
  }
};

inline void write_png(const std::string& path, const Canvas& canvas) {
  using namespace png_detail;
  std::ofstream f(path, std::ios::binary);
  if (!f) throw data_error("png: cannot create " + path);
  static const unsigned char sig[8] = {0x89, 'P', 'N', 'G', '\r', '\n', 0x1A, '\n'};
  f.write(reinterpret_cast<const char*>(sig), 8);

  std::string ihdr;
  put_be32(ihdr, uint32_t(canvas.w));
  put_be32(ihdr, uint32_t(canvas.h));
  ihdr.push_back(8);   // bit depth
  ihdr.push_back(2);   // truecolor
  ihdr.push_back(0);   // compression
  ihdr.push_back(0);   // filter
  ihdr.push_back(0);   // no interlace
  chunk(f, "IHDR", ihdr);

  std::vector<uint8_t> raw;
  raw.reserve(size_t(canvas.h) * (size_t(canvas.w) * 3 + 1));
  for (int y = 0; y < canvas.h; ++y) {
    raw.push_back(0);  // filter type none
    const uint8_t* row = canvas.px.data() + size_t(y) * size_t(canvas.w) * 3;
    raw.insert(raw.end(), row, row + size_t(canvas.w) * 3);
  }
  uLongf comp_len = compressBound(uLong(raw.size()));
  std::vector<uint8_t> comp(comp_len);
  if (compress2(comp.data(), &comp_len, raw.data(), uLong(raw.size()), 9) != Z_OK)
    throw data_error("png: deflate failed for " + path);
  chunk(f, "IDAT", std::string(reinterpret_cast<char*>(comp.data()), comp_len));
  chunk(f, "IEND", "");
  if (!f) throw data_error("png: write failed for " + path);
}

}  // namespace sunet
