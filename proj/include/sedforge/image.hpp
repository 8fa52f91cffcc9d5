#pragma once

#include <png.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <memory>
#include <vector>

#include "sedforge/error.hpp"
#include "sedforge/tensor.hpp"

namespace sedforge {

/// 8-bit grayscale raster, row 0 at the top.
struct GrayImage {
  std::size_t width = 0, height = 0;
  std::vector<std::uint8_t> pixels;
};

/// Renders a [rows, cols] matrix with row 0 at the bottom (low mel bands /
/// first class at the bottom), min-max scaled to 0..255 and each cell
/// enlarged to `scale` x `scale` pixels.
template <class S>
GrayImage render_matrix(const Tensor<S>& m, std::size_t scale = 4) {
  require_rank(m, 2, "image matrix");
  if (scale == 0) throw ConfigError("image scale must be positive");
  const std::size_t R = m.dim(0), C = m.dim(1);
  double lo = 0, hi = 0;
  if (!m.empty()) {
    const auto [mn, mx] = std::minmax_element(m.values().begin(), m.values().end());
    lo = static_cast<double>(*mn);
    hi = static_cast<double>(*mx);
  }
  GrayImage img;
  img.width = C * scale;
  img.height = R * scale;
  img.pixels.resize(img.width * img.height);
  for (std::size_t r = 0; r < R; ++r)
    for (std::size_t c = 0; c < C; ++c) {
      const double v = hi > lo ? (static_cast<double>(m.at(r, c)) - lo) / (hi - lo) : 0.0;
      const auto px = static_cast<std::uint8_t>(std::lround(v * 255.0));
      for (std::size_t dy = 0; dy < scale; ++dy) {
        const std::size_t y = (R - 1 - r) * scale + dy;
        std::fill_n(&img.pixels[y * img.width + c * scale], scale, px);
      }
    }
  return img;
}

inline void write_png(const std::filesystem::path& path, const GrayImage& img) {
  if (img.width == 0 || img.height == 0) throw IoError("cannot write an empty image: " + path.string());
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::unique_ptr<FILE, int (*)(FILE*)> fp(std::fopen(path.string().c_str(), "wb"), &std::fclose);
  if (!fp) throw IoError("cannot open " + path.string() + " for writing");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng initialization failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng failed writing " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height),
               8, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (std::size_t y = 0; y < img.height; ++y)
    png_write_row(png, const_cast<png_bytep>(&img.pixels[y * img.width]));
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

/// Whitespace-separated text form of a matrix, one row per line.
template <class S>
std::string format_matrix_text(const Tensor<S>& m) {
  require_rank(m, 2, "matrix");
  std::string out;
  char buf[32];
  for (std::size_t r = 0; r < m.dim(0); ++r) {
    for (std::size_t c = 0; c < m.dim(1); ++c) {
      std::snprintf(buf, sizeof buf, "%s%.6g", c ? " " : "", static_cast<double>(m.at(r, c)));
      out += buf;
    }
    out += '\n';
  }
  return out;
}

}  // namespace sedforge
