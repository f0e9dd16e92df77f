// Copyright 2026 The HistoAge Authors.
// SPDX-License-Identifier: Apache-2.0

#include "histoage/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>

#include "histoage/io.hpp"

namespace histoage {

double ImageF::mean() const {
  double s = 0;
  for (const float v : data) s += v;
  return data.empty() ? 0.0 : s / static_cast<double>(data.size());
}

ImageF to_float(const Image8& rgb) {
  if (rgb.channels != 3) throw ContractError("to_float: expected 3 channels");
  ImageF out(rgb.width, rgb.height);
  for (std::size_t i = 0; i < rgb.pixels.size(); ++i) out.data[i] = rgb.pixels[i] / 255.0f;
  return out;
}

Image8 to_u8(const ImageF& image) {
  Image8 out(image.width, image.height, 3);
  for (std::size_t i = 0; i < image.data.size(); ++i) {
    const float v = std::clamp(image.data[i], 0.0f, 1.0f);
    out.pixels[i] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
  }
  return out;
}

Image8 crop(const Image8& image, int x, int y, int w, int h) {
  if (x < 0 || y < 0 || w <= 0 || h <= 0 || x + w > image.width || y + h > image.height)
    throw ContractError("crop: rectangle outside image");
  Image8 out(w, h, image.channels);
  const std::size_t row_bytes = static_cast<std::size_t>(w) * image.channels;
  for (int r = 0; r < h; ++r) std::memcpy(out.at(0, r), image.at(x, y + r), row_bytes);
  return out;
}

Image8 read_png(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw MissingArtifactError(path.string());
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str()))
    throw Error("png read failed for " + path.string() + ": " + img.message);
  const bool gray = (img.format & PNG_FORMAT_FLAG_COLOR) == 0;
  img.format = gray ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  Image8 out(static_cast<int>(img.width), static_cast<int>(img.height), gray ? 1 : 3);
  if (!png_image_finish_read(&img, nullptr, out.pixels.data(), 0, nullptr)) {
    png_image_free(&img);
    throw Error("png decode failed for " + path.string() + ": " + img.message);
  }
  return out;
}

void write_png(const std::filesystem::path& path, const Image8& image) {
  if (!image.valid() || (image.channels != 1 && image.channels != 3))
    throw ContractError("write_png: invalid image");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  png_image img;
  std::memset(&img, 0, sizeof img);
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = image.channels == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  if (!png_image_write_to_file(&img, path.c_str(), 0, image.pixels.data(), 0, nullptr))
    throw Error("png write failed for " + path.string() + ": " + img.message);
}

namespace {

struct TiffReader {
  const std::vector<std::uint8_t>& bytes;
  bool little;

  std::uint32_t u16(std::size_t off) const {
    if (off + 2 > bytes.size()) throw ContractError("tiff: truncated");
    return little ? bytes[off] | (bytes[off + 1] << 8) : (bytes[off] << 8) | bytes[off + 1];
  }
  std::uint32_t u32(std::size_t off) const {
    if (off + 4 > bytes.size()) throw ContractError("tiff: truncated");
    return little ? u16(off) | (u16(off + 2) << 16) : (u16(off) << 16) | u16(off + 2);
  }
  std::vector<std::uint32_t> values(std::size_t entry) const {
    const std::uint32_t type = u16(entry + 2);
    const std::uint32_t count = u32(entry + 4);
    const std::size_t size = type == 3 ? 2 : 4;
    if (type != 3 && type != 4) throw ContractError("tiff: unsupported field type");
    const std::size_t base = count * size <= 4 ? entry + 8 : u32(entry + 8);
    std::vector<std::uint32_t> out(count);
    for (std::uint32_t i = 0; i < count; ++i) out[i] = size == 2 ? u16(base + 2 * i) : u32(base + 4 * i);
    return out;
  }
};

void put16(std::vector<std::uint8_t>& b, std::uint32_t v) {
  b.push_back(v & 0xFF);
  b.push_back((v >> 8) & 0xFF);
}
void put32(std::vector<std::uint8_t>& b, std::uint32_t v) {
  put16(b, v & 0xFFFF);
  put16(b, v >> 16);
}

}  // namespace

Image8 read_tiff(const std::filesystem::path& path) {
  const auto bytes = read_bytes(path);
  if (bytes.size() < 8) throw ContractError("tiff: too short: " + path.string());
  const bool little = bytes[0] == 'I' && bytes[1] == 'I';
  if (!little && !(bytes[0] == 'M' && bytes[1] == 'M')) throw ContractError("tiff: bad byte order");
  TiffReader r{bytes, little};
  if (r.u16(2) != 42) throw ContractError("tiff: bad magic");
  const std::size_t ifd = r.u32(4);
  const std::uint32_t n = r.u16(ifd);
  std::map<std::uint32_t, std::vector<std::uint32_t>> tags;
  for (std::uint32_t i = 0; i < n; ++i) {
    const std::size_t entry = ifd + 2 + 12 * i;
    tags[r.u16(entry)] = r.values(entry);
  }
  auto tag = [&](std::uint32_t id, std::uint32_t fallback) {
    auto it = tags.find(id);
    return it == tags.end() ? fallback : it->second.at(0);
  };
  const int width = static_cast<int>(tag(256, 0));
  const int height = static_cast<int>(tag(257, 0));
  if (tag(259, 1) != 1) throw ContractError("tiff: only uncompressed images are supported");
  if (tag(277, 1) != 3 || tag(258, 8) != 8 || tag(284, 1) != 1)
    throw ContractError("tiff: only 8-bit chunky RGB is supported");
  const auto& offsets = tags.at(273);
  const auto& counts = tags.at(279);
  Image8 out(width, height, 3);
  std::size_t pos = 0;
  for (std::size_t s = 0; s < offsets.size(); ++s) {
    const std::size_t len = std::min<std::size_t>(counts.at(s), out.pixels.size() - pos);
    if (offsets[s] + len > bytes.size()) throw ContractError("tiff: strip outside file");
    std::memcpy(out.pixels.data() + pos, bytes.data() + offsets[s], len);
    pos += len;
  }
  if (pos != out.pixels.size()) throw ContractError("tiff: pixel data truncated");
  return out;
}

void write_tiff(const std::filesystem::path& path, const Image8& image) {
  if (!image.valid() || image.channels != 3) throw ContractError("write_tiff: expected RGB image");
  std::vector<std::uint8_t> b = {'I', 'I'};
  put16(b, 42);
  put32(b, 8);
  constexpr std::uint32_t kTags = 10;
  const std::uint32_t ifd_size = 2 + 12 * kTags + 4;
  const std::uint32_t bps_offset = 8 + ifd_size;
  const std::uint32_t data_offset = bps_offset + 6;
  const auto data_len = static_cast<std::uint32_t>(image.pixels.size());
  put16(b, kTags);
  auto entry = [&b](std::uint32_t tag, std::uint32_t type, std::uint32_t count, std::uint32_t value) {
    put16(b, tag);
    put16(b, type);
    put32(b, count);
    if (type == 3 && count == 1) {
      put16(b, value);
      put16(b, 0);
    } else {
      put32(b, value);
    }
  };
  entry(256, 4, 1, static_cast<std::uint32_t>(image.width));
  entry(257, 4, 1, static_cast<std::uint32_t>(image.height));
  entry(258, 3, 3, bps_offset);
  entry(259, 3, 1, 1);
  entry(262, 3, 1, 2);
  entry(273, 4, 1, data_offset);
  entry(277, 3, 1, 3);
  entry(278, 4, 1, static_cast<std::uint32_t>(image.height));
  entry(279, 4, 1, data_len);
  entry(284, 3, 1, 1);
  put32(b, 0);
  put16(b, 8);
  put16(b, 8);
  put16(b, 8);
  b.insert(b.end(), image.pixels.begin(), image.pixels.end());
  write_bytes(path, b);
}

}  // namespace histoage
