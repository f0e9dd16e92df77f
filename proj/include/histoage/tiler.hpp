// Copyright 2026 The HistoAge Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "histoage/image.hpp"

namespace histoage {

enum class ScaleTag { kS1, kS2, kS3 };

std::string to_string(ScaleTag tag);
ScaleTag parse_scale_tag(std::string_view text);

inline constexpr int kPatchOverlapPx = 50;
inline constexpr int kStoredPatchSide = 256;
inline constexpr int kNetworkInputSide = 224;

/// A whole-slide raster. Only 2140 and 4280 ppi scans are accepted.
struct SlideRaster {
  std::string slide_id;
  std::string subject_pid;
  int resolution_ppi = 2140;
  Image8 pixels;  // RGB

  void validate() const;
};

double ppi_to_px_per_cm(double ppi);

/// Physical extent of `width_px` pixels at the given resolution.
double physical_width_cm(double width_px, double resolution_px_per_cm);

/// S1: 512 px at 2140 ppi, 1024 px at 4280 ppi. S2: 2048 / 4096 px.
int patch_side(ScaleTag tag, int resolution_ppi);

/// Origins along one axis: stride side - overlap, with the last origin
/// clamped so the final patch ends at the edge. A single origin 0 when
/// length <= side.
std::vector<int> axis_origins(int length, int side, int overlap = kPatchOverlapPx);

/// Closed form of axis_origins(...).size().
int axis_patch_count(int length, int side, int overlap = kPatchOverlapPx);

struct Patch {
  std::string slide_id;
  std::string patch_id;
  int origin_x = 0;
  int origin_y = 0;
  int side_px = 0;    // nominal side for the scale
  int extent_w = 0;   // clipped to the slide; equals side_px unless the slide is smaller
  int extent_h = 0;
  ScaleTag scale = ScaleTag::kS1;
  bool foreground = false;
};

/// Row-major grid of patches, ordered by (origin_y, origin_x). Throws
/// ContractError when either slide dimension is below 224 px.
std::vector<Patch> tile(const SlideRaster& slide, ScaleTag scale);

struct ForegroundThresholds {
  double min_saturation = 0.15;
  double max_value = 0.92;
  double min_tissue_fraction = 0.20;
};

/// A pixel is tissue when its HSV saturation >= min_saturation and its value
/// <= max_value.
bool is_tissue_pixel(const std::uint8_t* rgb, const ForegroundThresholds& t = {});
double tissue_fraction(const Image8& raw, const ForegroundThresholds& t = {});
bool foreground_filter(const Image8& raw, const ForegroundThresholds& t = {});

/// Area-weighted (box) resample of an RGB raster to out_side x out_side,
/// values scaled to [0, 1]. Preserves the mean up to rounding.
ImageF downscale(const Image8& raw, int out_side = kStoredPatchSide);

/// Sidecar JSON next to a slide image: {"slide_id", "ppi", "subject_pid"}.
struct SlideSidecar {
  std::string slide_id;
  int ppi = 2140;
  std::string subject_pid;
};

SlideSidecar read_sidecar(const std::filesystem::path& path);
void write_sidecar(const std::filesystem::path& path, const SlideSidecar& sidecar);

/// Loads `<dir>/<slide_id>.json` and the matching `.png` or `.tif`.
SlideRaster load_slide(const std::filesystem::path& dir, const std::string& slide_id);

/// Slide ids in `dir`, taken from `*.json` sidecars, sorted.
std::vector<std::string> list_slides(const std::filesystem::path& dir);

}  // namespace histoage
