// Copyright 2026 The Serval Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <istream>
#include <string>
#include <vector>

#include "serval/common.hpp"

namespace serval::data {

/// Interleaved 8-bit RGB raster.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // height * width * 3

  bool empty() const { return width <= 0 || height <= 0; }

  std::uint8_t& at(int y, int x, int c) {
    return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
  std::uint8_t at(int y, int x, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }

  static Image solid(int width, int height, std::uint8_t r, std::uint8_t g,
                     std::uint8_t b) {
    Image im;
    im.width = width;
    im.height = height;
    im.pixels.resize(static_cast<std::size_t>(width) * height * 3);
    for (std::size_t i = 0; i < im.pixels.size(); i += 3) {
      im.pixels[i] = r;
      im.pixels[i + 1] = g;
      im.pixels[i + 2] = b;
    }
    return im;
  }
};

/// Binary portable pixmap (P6, maxval 255), the native fixture format.
inline void save_ppm(const Image& im, const std::string& path) {
  if (im.empty()) throw IoError("save_ppm: empty image for '" + path + "'");
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("save_ppm: cannot open '" + path + "' for writing");
  out << "P6\n" << im.width << " " << im.height << "\n255\n";
  out.write(reinterpret_cast<const char*>(im.pixels.data()),
            static_cast<std::streamsize>(im.pixels.size()));
  if (!out) throw IoError("save_ppm: short write to '" + path + "'");
}

namespace detail {

inline int read_ppm_token(std::istream& in, const std::string& path) {
  // Whitespace and '#' comments may separate header tokens.
  int c = in.get();
  while (c != EOF && (std::isspace(c) || c == '#')) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
    }
    c = in.get();
  }
  int value = 0;
  bool any = false;
  while (c != EOF && std::isdigit(c)) {
    value = value * 10 + (c - '0');
    any = true;
    c = in.get();
  }
  if (!any) throw DataError("load_ppm: malformed header in '" + path + "'");
  return value;
}

}  // namespace detail

inline Image load_ppm(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("load_ppm: cannot open '" + path + "'");
  char magic[2] = {0, 0};
  in.read(magic, 2);
  if (magic[0] != 'P' || magic[1] != '6') {
    throw DataError("load_ppm: '" + path + "' is not a binary pixmap (P6)");
  }
  Image im;
  im.width = detail::read_ppm_token(in, path);
  im.height = detail::read_ppm_token(in, path);
  int maxval = detail::read_ppm_token(in, path);
  if (maxval != 255) {
    throw DataError("load_ppm: unsupported maxval " + std::to_string(maxval) +
                    " in '" + path + "'");
  }
  if (im.width <= 0 || im.height <= 0) {
    throw DataError("load_ppm: degenerate dimensions in '" + path + "'");
  }
  im.pixels.resize(static_cast<std::size_t>(im.width) * im.height * 3);
  in.read(reinterpret_cast<char*>(im.pixels.data()),
          static_cast<std::streamsize>(im.pixels.size()));
  if (in.gcount() != static_cast<std::streamsize>(im.pixels.size())) {
    throw DataError("load_ppm: truncated pixel data in '" + path + "'");
  }
  return im;
}

/// Reads just the dimensions of a pixmap, for cheap bounds validation.
inline bool probe_ppm(const std::string& path, int& width, int& height) {
  std::ifstream in(path, std::ios::binary);
  if (!in) return false;
  char magic[2] = {0, 0};
  in.read(magic, 2);
  if (magic[0] != 'P' || magic[1] != '6') return false;
  try {
    width = detail::read_ppm_token(in, path);
    height = detail::read_ppm_token(in, path);
  } catch (const DataError&) {
    return false;
  }
  return true;
}

/// Direct bilinear resample to target_side x target_side; aspect ratio is
/// not preserved. Center-aligned sampling makes the operation the
/// identity when the input is already at the target size.
inline Image resize_image(const Image& im, int target_side) {
  if (im.empty()) throw DataError("resize_image: empty image");
  if (target_side <= 0) {
    throw ConfigError("resize_image: target_side must be positive");
  }
  if (im.width == target_side && im.height == target_side) return im;

  Image out;
  out.width = target_side;
  out.height = target_side;
  out.pixels.resize(static_cast<std::size_t>(target_side) * target_side * 3);
  double sx = static_cast<double>(im.width) / target_side;
  double sy = static_cast<double>(im.height) / target_side;
  for (int y = 0; y < target_side; ++y) {
    double fy = (y + 0.5) * sy - 0.5;
    int y0 = static_cast<int>(std::floor(fy));
    double wy = fy - y0;
    int ya = std::clamp(y0, 0, im.height - 1);
    int yb = std::clamp(y0 + 1, 0, im.height - 1);
    for (int x = 0; x < target_side; ++x) {
      double fx = (x + 0.5) * sx - 0.5;
      int x0 = static_cast<int>(std::floor(fx));
      double wx = fx - x0;
      int xa = std::clamp(x0, 0, im.width - 1);
      int xb = std::clamp(x0 + 1, 0, im.width - 1);
      for (int c = 0; c < 3; ++c) {
        double top = (1.0 - wx) * im.at(ya, xa, c) + wx * im.at(ya, xb, c);
        double bot = (1.0 - wx) * im.at(yb, xa, c) + wx * im.at(yb, xb, c);
        double v = (1.0 - wy) * top + wy * bot;
        out.at(y, x, c) =
            static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
      }
    }
  }
  return out;
}

/// Exact pixel sub-rectangle.
inline Image crop_image(const Image& im, int x, int y, int w, int h) {
  if (w <= 0 || h <= 0 || x < 0 || y < 0 || x + w > im.width ||
      y + h > im.height) {
    throw DataError("crop_image: box (" + std::to_string(x) + "," +
                    std::to_string(y) + "," + std::to_string(w) + "," +
                    std::to_string(h) + ") outside image " +
                    std::to_string(im.width) + "x" +
                    std::to_string(im.height));
  }
  Image out;
  out.width = w;
  out.height = h;
  out.pixels.resize(static_cast<std::size_t>(w) * h * 3);
  for (int row = 0; row < h; ++row) {
    for (int col = 0; col < w; ++col) {
      for (int c = 0; c < 3; ++c) {
        out.at(row, col, c) = im.at(y + row, x + col, c);
      }
    }
  }
  return out;
}

}  // namespace serval::data
