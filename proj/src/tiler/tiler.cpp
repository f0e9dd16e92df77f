// Copyright 2026 The HistoAge Authors.
// SPDX-License-Identifier: Apache-2.0

#include "histoage/tiler.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include <json.hpp>

#include "histoage/io.hpp"

namespace histoage {

std::string to_string(ScaleTag tag) {
  switch (tag) {
    case ScaleTag::kS1: return "S1";
    case ScaleTag::kS2: return "S2";
    case ScaleTag::kS3: return "S3";
  }
  return "?";
}

ScaleTag parse_scale_tag(std::string_view text) {
  if (text == "S1") return ScaleTag::kS1;
  if (text == "S2") return ScaleTag::kS2;
  if (text == "S3") return ScaleTag::kS3;
  throw ContractError("unknown scale tag: " + std::string(text));
}

void SlideRaster::validate() const {
  if (resolution_ppi != 2140 && resolution_ppi != 4280)
    throw ContractError("slide " + slide_id + ": resolution must be 2140 or 4280 ppi, got " +
                        std::to_string(resolution_ppi));
  if (!pixels.valid() || pixels.channels != 3)
    throw ContractError("slide " + slide_id + ": pixel buffer does not match width*height*3");
}

double ppi_to_px_per_cm(double ppi) { return ppi / 2.54; }

double physical_width_cm(double width_px, double resolution_px_per_cm) {
  if (!(width_px > 0)) throw ContractError("physical_width: width must be positive");
  if (!(resolution_px_per_cm > 0)) throw ContractError("physical_width: resolution must be positive");
  return width_px / resolution_px_per_cm;
}

int patch_side(ScaleTag tag, int resolution_ppi) {
  const bool high = resolution_ppi == 4280;
  if (!high && resolution_ppi != 2140)
    throw ContractError("patch_side: unsupported resolution " + std::to_string(resolution_ppi));
  switch (tag) {
    case ScaleTag::kS1: return high ? 1024 : 512;
    case ScaleTag::kS2: return high ? 4096 : 2048;
    case ScaleTag::kS3: break;
  }
  throw ContractError("patch_side: S3 is a feature combination, not a tiling scale");
}

std::vector<int> axis_origins(int length, int side, int overlap) {
  if (length <= 0 || side <= overlap) throw ContractError("axis_origins: bad geometry");
  if (length <= side) return {0};
  const int stride = side - overlap;
  std::vector<int> out;
  for (int origin = 0; origin + side < length; origin += stride) out.push_back(origin);
  out.push_back(length - side);
  return out;
}

int axis_patch_count(int length, int side, int overlap) {
  if (length <= side) return 1;
  const int stride = side - overlap;
  return (length - side + stride - 1) / stride + 1;
}

std::vector<Patch> tile(const SlideRaster& slide, ScaleTag scale) {
  slide.validate();
  const int w = slide.pixels.width, h = slide.pixels.height;
  if (w < kNetworkInputSide || h < kNetworkInputSide)
    throw ContractError("tile: slide " + slide.slide_id + " is smaller than 224 px");
  const int side = patch_side(scale, slide.resolution_ppi);
  const auto xs = axis_origins(w, side);
  const auto ys = axis_origins(h, side);
  std::vector<Patch> out;
  out.reserve(xs.size() * ys.size());
  for (const int y : ys) {
    for (const int x : xs) {
      Patch p;
      p.slide_id = slide.slide_id;
      char id[32];
      std::snprintf(id, sizeof id, "-%s-%04zu", to_string(scale).c_str(), out.size());
      p.patch_id = slide.slide_id + id;
      p.origin_x = x;
      p.origin_y = y;
      p.side_px = side;
      p.extent_w = std::min(side, w);
      p.extent_h = std::min(side, h);
      p.scale = scale;
      out.push_back(std::move(p));
    }
  }
  return out;
}

bool is_tissue_pixel(const std::uint8_t* rgb, const ForegroundThresholds& t) {
  const int mx = std::max({rgb[0], rgb[1], rgb[2]});
  const int mn = std::min({rgb[0], rgb[1], rgb[2]});
  const double value = mx / 255.0;
  const double saturation = mx == 0 ? 0.0 : static_cast<double>(mx - mn) / mx;
  return saturation >= t.min_saturation && value <= t.max_value;
}

double tissue_fraction(const Image8& raw, const ForegroundThresholds& t) {
  if (!raw.valid() || raw.channels != 3) throw ContractError("tissue_fraction: expected RGB image");
  std::size_t tissue = 0;
  const std::size_t n = static_cast<std::size_t>(raw.width) * raw.height;
  for (std::size_t i = 0; i < n; ++i) tissue += is_tissue_pixel(raw.pixels.data() + 3 * i, t);
  return static_cast<double>(tissue) / static_cast<double>(n);
}

bool foreground_filter(const Image8& raw, const ForegroundThresholds& t) {
  return tissue_fraction(raw, t) >= t.min_tissue_fraction;
}

namespace {

struct Span {
  int first = 0;
  std::vector<double> weights;  // normalised to sum 1
};

// Output cell o covers source interval [o * in / out, (o + 1) * in / out).
// Bounds are kept as integer numerators over `out` so overlaps are exact.
std::vector<Span> box_spans(int in, int out) {
  std::vector<Span> spans(out);
  for (int o = 0; o < out; ++o) {
    const long long lo = static_cast<long long>(o) * in;        // scaled by out
    const long long hi = static_cast<long long>(o + 1) * in;
    const int first = static_cast<int>(lo / out);
    const int last = static_cast<int>((hi - 1) / out);
    Span& s = spans[o];
    s.first = first;
    for (int i = first; i <= last; ++i) {
      const long long a = std::max<long long>(lo, static_cast<long long>(i) * out);
      const long long b = std::min<long long>(hi, static_cast<long long>(i + 1) * out);
      s.weights.push_back(static_cast<double>(b - a) / static_cast<double>(in));
    }
  }
  return spans;
}

}  // namespace

ImageF downscale(const Image8& raw, int out_side) {
  if (!raw.valid() || raw.channels != 3) throw ContractError("downscale: expected RGB image");
  const auto xs = box_spans(raw.width, out_side);
  const auto ys = box_spans(raw.height, out_side);
  // Horizontal pass into a double buffer, then vertical.
  std::vector<double> tmp(static_cast<std::size_t>(raw.height) * out_side * 3, 0.0);
  for (int y = 0; y < raw.height; ++y) {
    const std::uint8_t* row = raw.at(0, y);
    double* dst = tmp.data() + static_cast<std::size_t>(y) * out_side * 3;
    for (int o = 0; o < out_side; ++o) {
      const Span& s = xs[o];
      double acc[3] = {0, 0, 0};
      for (std::size_t k = 0; k < s.weights.size(); ++k) {
        const std::uint8_t* px = row + 3 * (s.first + static_cast<int>(k));
        for (int c = 0; c < 3; ++c) acc[c] += s.weights[k] * px[c];
      }
      for (int c = 0; c < 3; ++c) dst[3 * o + c] = acc[c];
    }
  }
  ImageF out(out_side, out_side);
  for (int o = 0; o < out_side; ++o) {
    const Span& s = ys[o];
    for (int x = 0; x < out_side; ++x) {
      double acc[3] = {0, 0, 0};
      for (std::size_t k = 0; k < s.weights.size(); ++k) {
        const double* px = tmp.data() + (static_cast<std::size_t>(s.first + k) * out_side + x) * 3;
        for (int c = 0; c < 3; ++c) acc[c] += s.weights[k] * px[c];
      }
      float* dst = out.at(x, o);
      for (int c = 0; c < 3; ++c) dst[c] = static_cast<float>(acc[c] / 255.0);
    }
  }
  return out;
}

SlideSidecar read_sidecar(const std::filesystem::path& path) {
  const auto j = nlohmann::json::parse(read_text(path));
  SlideSidecar s;
  s.slide_id = j.at("slide_id").get<std::string>();
  s.ppi = j.at("ppi").get<int>();
  s.subject_pid = j.at("subject_pid").get<std::string>();
  return s;
}

void write_sidecar(const std::filesystem::path& path, const SlideSidecar& s) {
  nlohmann::json j{{"slide_id", s.slide_id}, {"ppi", s.ppi}, {"subject_pid", s.subject_pid}};
  write_text(path, j.dump(2) + "\n");
}

SlideRaster load_slide(const std::filesystem::path& dir, const std::string& slide_id) {
  const auto sidecar = read_sidecar(dir / (slide_id + ".json"));
  SlideRaster slide;
  slide.slide_id = sidecar.slide_id;
  slide.subject_pid = sidecar.subject_pid;
  slide.resolution_ppi = sidecar.ppi;
  if (std::filesystem::exists(dir / (slide_id + ".png"))) {
    slide.pixels = read_png(dir / (slide_id + ".png"));
  } else if (std::filesystem::exists(dir / (slide_id + ".tif"))) {
    slide.pixels = read_tiff(dir / (slide_id + ".tif"));
  } else if (std::filesystem::exists(dir / (slide_id + ".tiff"))) {
    slide.pixels = read_tiff(dir / (slide_id + ".tiff"));
  } else {
    throw MissingArtifactError((dir / (slide_id + ".png")).string());
  }
  slide.validate();
  return slide;
}

std::vector<std::string> list_slides(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw MissingArtifactError(dir.string());
  std::vector<std::string> ids;
  for (const auto& entry : std::filesystem::directory_iterator(dir)) {
    if (entry.path().extension() != ".json") continue;
    ids.push_back(entry.path().stem().string());
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

}  // namespace histoage
