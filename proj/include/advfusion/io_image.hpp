#pragma once

#include <png.h>

#include <algorithm>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <vector>

#include "advfusion/tensor.hpp"

namespace advf {

// 8-bit RGB PNG. Tensors are 3xHxW CHW float64 in [0, 1].
inline void save_png(const std::string& path, const Tensor& img) {
  if (img.shape.size() != 3 || img.shape[0] != 3)
    throw std::invalid_argument("save_png: expected 3xHxW tensor, got " + img.shape_str());
  const int64_t h = img.shape[1], w = img.shape[2];
  FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw std::runtime_error("save_png: cannot open " + path);
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    std::fclose(fp);
    throw std::runtime_error("save_png: libpng failure for " + path);
  }
  png_init_io(png, fp);
  png_set_IHDR(png, info, static_cast<png_uint_32>(w), static_cast<png_uint_32>(h), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  std::vector<png_byte> row(static_cast<size_t>(w) * 3);
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x)
      for (int ch = 0; ch < 3; ++ch) {
        double v = std::clamp(img.at3(ch, y, x), 0.0, 1.0);
        row[x * 3 + ch] = static_cast<png_byte>(std::lround(v * 255.0));
      }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  std::fclose(fp);
}

inline Tensor load_png(const std::string& path) {
  FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw std::runtime_error("load_png: cannot open " + path);
  png_byte header[8];
  if (std::fread(header, 1, 8, fp) != 8 || png_sig_cmp(header, 0, 8)) {
    std::fclose(fp);
    throw std::runtime_error("load_png: not a PNG file: " + path);
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (!png || !info || setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    std::fclose(fp);
    throw std::runtime_error("load_png: libpng failure for " + path);
  }
  png_init_io(png, fp);
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  png_set_expand(png);
  png_set_strip_16(png);
  png_set_strip_alpha(png);
  png_set_gray_to_rgb(png);
  png_read_update_info(png, info);
  const int64_t w = png_get_image_width(png, info);
  const int64_t h = png_get_image_height(png, info);
  std::vector<png_byte> row(static_cast<size_t>(png_get_rowbytes(png, info)));
  Tensor img({3, h, w});
  for (int64_t y = 0; y < h; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (int64_t x = 0; x < w; ++x)
      for (int ch = 0; ch < 3; ++ch) img.at3(ch, y, x) = row[x * 3 + ch] / 255.0;
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  std::fclose(fp);
  return img;
}

// 16-bit binary PGM depth map. Values are meters stored as millimeters,
// saturating at 65.535 m.
inline void save_depth_pgm(const std::string& path, const Tensor& depth) {
  if (depth.shape.size() != 2)
    throw std::invalid_argument("save_depth_pgm: expected HxW tensor, got " + depth.shape_str());
  const int64_t h = depth.shape[0], w = depth.shape[1];
  FILE* fp = std::fopen(path.c_str(), "wb");
  if (!fp) throw std::runtime_error("save_depth_pgm: cannot open " + path);
  std::string header = "P5\n" + std::to_string(w) + " " + std::to_string(h) + "\n65535\n";
  std::fwrite(header.data(), 1, header.size(), fp);
  std::vector<uint8_t> row(static_cast<size_t>(w) * 2);
  for (int64_t y = 0; y < h; ++y) {
    for (int64_t x = 0; x < w; ++x) {
      double mm = std::clamp(depth.at2(y, x) * 1000.0, 0.0, 65535.0);
      uint16_t v = static_cast<uint16_t>(std::lround(mm));
      row[x * 2] = static_cast<uint8_t>(v >> 8);  // PGM is big-endian
      row[x * 2 + 1] = static_cast<uint8_t>(v & 0xff);
    }
    std::fwrite(row.data(), 1, row.size(), fp);
  }
  std::fclose(fp);
}

inline Tensor load_depth_pgm(const std::string& path) {
  FILE* fp = std::fopen(path.c_str(), "rb");
  if (!fp) throw std::runtime_error("load_depth_pgm: cannot open " + path);
  auto fail = [&](const std::string& why) {
    std::fclose(fp);
    throw std::runtime_error("load_depth_pgm: " + why + ": " + path);
  };
  char magic[3] = {0, 0, 0};
  if (std::fread(magic, 1, 2, fp) != 2 || magic[0] != 'P' || magic[1] != '5')
    fail("not a binary PGM");
  auto next_int = [&]() -> long {
    int c;
    // skip whitespace and comments
    while ((c = std::fgetc(fp)) != EOF) {
      if (c == '#') {
        while ((c = std::fgetc(fp)) != EOF && c != '\n') {}
      } else if (!std::isspace(c)) {
        break;
      }
    }
    if (c == EOF) fail("truncated header");
    long v = 0;
    while (c != EOF && std::isdigit(c)) {
      v = v * 10 + (c - '0');
      c = std::fgetc(fp);
    }
    return v;
  };
  long w = next_int(), h = next_int(), maxval = next_int();
  if (w <= 0 || h <= 0) fail("bad dimensions");
  if (maxval != 65535) fail("expected 16-bit PGM (maxval 65535)");
  Tensor depth({h, w});
  std::vector<uint8_t> row(static_cast<size_t>(w) * 2);
  for (long y = 0; y < h; ++y) {
    if (std::fread(row.data(), 1, row.size(), fp) != row.size()) fail("truncated pixel data");
    for (long x = 0; x < w; ++x) {
      uint16_t v = static_cast<uint16_t>((row[x * 2] << 8) | row[x * 2 + 1]);
      depth.at2(y, x) = v / 1000.0;
    }
  }
  std::fclose(fp);
  return depth;
}

}  // namespace advf
