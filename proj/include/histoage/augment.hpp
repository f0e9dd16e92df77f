// Copyright 2026 The HistoAge Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>

#include "histoage/image.hpp"

namespace histoage {

/// Contrasting augmentation policy. Each transform fires independently with
/// its own probability. Color magnitudes are drawn uniform in [0, max]; the
/// sign is fixed by the view (v1 positive, v2 negative). Brightness is shared
/// by both views in kind but drawn independently, uniform in [-max, +max].
struct AugmentPolicy {
  struct View {
    double p_rotation = 0.75;
    double p_flip = 0.75;
    double p_contrast = 0.75;
    double p_saturation = 0.75;
    double p_hue = 0.75;
    double rotation_max_deg = 90.0;
    double contrast_max = 1.9;
    double saturation_max = 1.1;
    double hue_delta = 0.01;  // applied exactly, sign from the view
  };

  double p_crop = 0.75;
  double p_brightness = 0.75;
  double brightness_max = 0.75;
  int crop_side = 224;
  View v1{};
  View v2{0.75, 0.75, 0.75, 0.75, 0.75, 180.0, 2.5, 0.75, 0.01};

  /// Same probability for every transform.
  static AugmentPolicy uniform(double p);
  void validate() const;
};

/// What one view actually received. Deltas are signed; zero when not fired.
struct AppliedTransforms {
  bool crop = false;
  int crop_x = 0;
  int crop_y = 0;
  bool brightness = false;
  double brightness_delta = 0;
  bool rotation = false;
  double rotation_deg_clockwise = 0;  // negative means anticlockwise
  bool flip = false;                  // vertical for v1, horizontal for v2
  bool contrast = false;
  double contrast_delta = 0;
  bool saturation = false;
  double saturation_delta = 0;
  bool hue = false;
  double hue_delta = 0;
};

struct ViewPair {
  ImageF v1;
  ImageF v2;
  std::uint64_t seed = 0;
  AppliedTransforms t1;
  AppliedTransforms t2;
};

/// Two contrasting views of a stored patch. Deterministic in (image, policy,
/// seed); callers fold the patch id and epoch into the seed.
///
/// Per view the order is rotate (reflect padding), flip, crop, then color
/// (brightness, contrast, saturation, hue), clipped to [0, 1]. With every
/// probability 0 both views are the top-left crop of the input.
ViewPair augment_pair(const ImageF& patch, const AugmentPolicy& policy, std::uint64_t seed);

// Color transforms, all clipped to [0, 1].
ImageF adjust_brightness(const ImageF& image, double delta);
/// mean + (1 + delta) * (x - mean), mean over all pixels and channels.
ImageF adjust_contrast(const ImageF& image, double delta);
/// HSV saturation scaled by (1 + delta).
ImageF adjust_saturation(const ImageF& image, double delta);
/// HSV hue shifted by delta, wrapping modulo 1.
ImageF adjust_hue(const ImageF& image, double delta);

void rgb_to_hsv(const float* rgb, float* hsv);
void hsv_to_rgb(const float* hsv, float* rgb);

// Geometric transforms on square images.
/// Rotation about the image center; positive is clockwise on screen.
/// Multiples of 90 degrees are exact permutations; other angles use bilinear
/// sampling with reflected borders.
ImageF rotate(const ImageF& image, double degrees_clockwise);
ImageF flip_vertical(const ImageF& image);
ImageF flip_horizontal(const ImageF& image);
ImageF crop(const ImageF& image, int x, int y, int side);
ImageF center_crop(const ImageF& image, int side);

/// Peak signal-to-noise ratio for [0, 1] images.
double psnr(const ImageF& a, const ImageF& b);

}  // namespace histoage
