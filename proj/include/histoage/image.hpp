// Copyright 2026 The HistoAge Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <vector>

#include "histoage/error.hpp"

namespace histoage {

/// 8-bit interleaved image, row-major, `channels` samples per pixel.
struct Image8 {
  int width = 0;
  int height = 0;
  int channels = 3;
  std::vector<std::uint8_t> pixels;

  Image8() = default;
  Image8(int w, int h, int c, std::uint8_t fill = 0)
      : width(w), height(h), channels(c), pixels(static_cast<std::size_t>(w) * h * c, fill) {}

  std::uint8_t* at(int x, int y) {
    return pixels.data() + (static_cast<std::size_t>(y) * width + x) * channels;
  }
  const std::uint8_t* at(int x, int y) const {
    return pixels.data() + (static_cast<std::size_t>(y) * width + x) * channels;
  }
  bool valid() const {
    return width > 0 && height > 0 && pixels.size() == static_cast<std::size_t>(width) * height * channels;
  }
};

/// Float RGB image (HWC) with values nominally in [0, 1].
struct ImageF {
  int width = 0;
  int height = 0;
  std::vector<float> data;  // width * height * 3

  ImageF() = default;
  ImageF(int w, int h, float fill = 0.0f)
      : width(w), height(h), data(static_cast<std::size_t>(w) * h * 3, fill) {}

  float* at(int x, int y) { return data.data() + (static_cast<std::size_t>(y) * width + x) * 3; }
  const float* at(int x, int y) const {
    return data.data() + (static_cast<std::size_t>(y) * width + x) * 3;
  }
  double mean() const;
  friend bool operator==(const ImageF&, const ImageF&) = default;
};

ImageF to_float(const Image8& rgb);
/// Rounds to nearest after clamping to [0, 1].
Image8 to_u8(const ImageF& image);

/// Copies a rectangle; the rectangle must lie inside the image.
Image8 crop(const Image8& image, int x, int y, int w, int h);

/// 8-bit RGB or grayscale PNG.
Image8 read_png(const std::filesystem::path& path);
void write_png(const std::filesystem::path& path, const Image8& image);

/// Baseline uncompressed TIFF, 8-bit RGB, chunky, little-endian.
Image8 read_tiff(const std::filesystem::path& path);
void write_tiff(const std::filesystem::path& path, const Image8& image);

}  // namespace histoage
