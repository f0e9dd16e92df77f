// Copyright 2026 The HistoAge Authors.
// SPDX-License-Identifier: Apache-2.0

#include "histoage/augment.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>

#include "histoage/rng.hpp"

namespace histoage {

AugmentPolicy AugmentPolicy::uniform(double p) {
  AugmentPolicy policy;
  policy.p_crop = policy.p_brightness = p;
  for (View* v : {&policy.v1, &policy.v2})
    v->p_rotation = v->p_flip = v->p_contrast = v->p_saturation = v->p_hue = p;
  return policy;
}

void AugmentPolicy::validate() const {
  auto prob = [](double p) {
    if (!(p >= 0.0 && p <= 1.0)) throw ContractError("augment: probability outside [0, 1]");
  };
  auto mag = [](double m) {
    if (!(m >= 0.0)) throw ContractError("augment: negative delta magnitude");
  };
  prob(p_crop);
  prob(p_brightness);
  mag(brightness_max);
  for (const View* v : {&v1, &v2}) {
    prob(v->p_rotation);
    prob(v->p_flip);
    prob(v->p_contrast);
    prob(v->p_saturation);
    prob(v->p_hue);
    mag(v->rotation_max_deg);
    mag(v->contrast_max);
    mag(v->saturation_max);
    mag(v->hue_delta);
  }
  if (crop_side <= 0) throw ContractError("augment: crop side must be positive");
}

namespace {

inline float clip01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

template <typename F>
ImageF map_pixels(const ImageF& image, F&& f) {
  ImageF out(image.width, image.height);
  const std::size_t n = static_cast<std::size_t>(image.width) * image.height;
  for (std::size_t i = 0; i < n; ++i) f(image.data.data() + 3 * i, out.data.data() + 3 * i);
  return out;
}

// Mirror without repeating the edge sample: ... 2 1 | 0 1 .. n-1 | n-2 ...
inline int reflect(int i, int n) {
  if (n == 1) return 0;
  const int period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

ImageF rotate_quarter(const ImageF& image, int quarters) {
  const int n = image.width;
  ImageF out(n, n);
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      int sx = x, sy = y;
      switch (quarters) {
        case 1: sx = y; sy = n - 1 - x; break;
        case 2: sx = n - 1 - x; sy = n - 1 - y; break;
        case 3: sx = n - 1 - y; sy = x; break;
        default: break;
      }
      std::copy_n(image.at(sx, sy), 3, out.at(x, y));
    }
  return out;
}

// Draw order is fixed so a stream consumes the same number of values
// whatever fires.
AppliedTransforms draw_view(Rng& rng, const AugmentPolicy& policy, const AugmentPolicy::View& v,
                            double sign, int max_offset) {
  AppliedTransforms t;
  t.crop = rng.bernoulli(policy.p_crop);
  const auto ox = static_cast<int>(rng.below(static_cast<std::uint64_t>(max_offset) + 1));
  const auto oy = static_cast<int>(rng.below(static_cast<std::uint64_t>(max_offset) + 1));
  if (t.crop) {
    t.crop_x = ox;
    t.crop_y = oy;
  }
  t.brightness = rng.bernoulli(policy.p_brightness);
  const double b = rng.uniform(-policy.brightness_max, policy.brightness_max);
  if (t.brightness) t.brightness_delta = b;

  t.rotation = rng.bernoulli(v.p_rotation);
  const double angle = v.rotation_max_deg * (1.0 - rng.uniform());  // (0, max]
  if (t.rotation) t.rotation_deg_clockwise = sign * angle;
  t.flip = rng.bernoulli(v.p_flip);
  t.contrast = rng.bernoulli(v.p_contrast);
  const double c = v.contrast_max * rng.uniform();
  if (t.contrast) t.contrast_delta = sign * c;
  t.saturation = rng.bernoulli(v.p_saturation);
  const double s = v.saturation_max * rng.uniform();
  if (t.saturation) t.saturation_delta = sign * s;
  t.hue = rng.bernoulli(v.p_hue);
  if (t.hue) t.hue_delta = sign * v.hue_delta;
  return t;
}

ImageF render_view(const ImageF& patch, const AppliedTransforms& t, bool vertical_flip, int side) {
  ImageF img = patch;
  if (t.rotation) img = rotate(img, t.rotation_deg_clockwise);
  if (t.flip) img = vertical_flip ? flip_vertical(img) : flip_horizontal(img);
  img = crop(img, t.crop_x, t.crop_y, side);
  if (t.brightness) img = adjust_brightness(img, t.brightness_delta);
  if (t.contrast) img = adjust_contrast(img, t.contrast_delta);
  if (t.saturation) img = adjust_saturation(img, t.saturation_delta);
  if (t.hue) img = adjust_hue(img, t.hue_delta);
  for (auto& v : img.data) v = std::clamp(v, 0.0f, 1.0f);
  return img;
}

}  // namespace

ViewPair augment_pair(const ImageF& patch, const AugmentPolicy& policy, std::uint64_t seed) {
  policy.validate();
  if (patch.width != patch.height || patch.width < policy.crop_side)
    throw ContractError("augment_pair: expected a square image of side >= crop side");
  const int max_offset = patch.width - policy.crop_side;
  Rng rng1(derive_seed(seed, 1));
  Rng rng2(derive_seed(seed, 2));
  ViewPair pair;
  pair.seed = seed;
  pair.t1 = draw_view(rng1, policy, policy.v1, +1.0, max_offset);
  pair.t2 = draw_view(rng2, policy, policy.v2, -1.0, max_offset);
  pair.v1 = render_view(patch, pair.t1, /*vertical_flip=*/true, policy.crop_side);
  pair.v2 = render_view(patch, pair.t2, /*vertical_flip=*/false, policy.crop_side);
  return pair;
}

void rgb_to_hsv(const float* rgb, float* hsv) {
  const float r = rgb[0], g = rgb[1], b = rgb[2];
  const float mx = std::max({r, g, b});
  const float mn = std::min({r, g, b});
  const float d = mx - mn;
  float h = 0.0f;
  if (d > 0.0f) {
    if (mx == r) {
      h = (g - b) / d;
      if (h < 0.0f) h += 6.0f;
    } else if (mx == g) {
      h = (b - r) / d + 2.0f;
    } else {
      h = (r - g) / d + 4.0f;
    }
    h /= 6.0f;
  }
  hsv[0] = h;
  hsv[1] = mx > 0.0f ? d / mx : 0.0f;
  hsv[2] = mx;
}

void hsv_to_rgb(const float* hsv, float* rgb) {
  const float h = hsv[0] - std::floor(hsv[0]);
  const float s = hsv[1], v = hsv[2];
  const float h6 = h * 6.0f;
  const int sector = std::min(5, static_cast<int>(h6));
  const float f = h6 - static_cast<float>(sector);
  const float p = v * (1.0f - s);
  const float q = v * (1.0f - s * f);
  const float t = v * (1.0f - s * (1.0f - f));
  switch (sector) {
    case 0: rgb[0] = v; rgb[1] = t; rgb[2] = p; break;
    case 1: rgb[0] = q; rgb[1] = v; rgb[2] = p; break;
    case 2: rgb[0] = p; rgb[1] = v; rgb[2] = t; break;
    case 3: rgb[0] = p; rgb[1] = q; rgb[2] = v; break;
    case 4: rgb[0] = t; rgb[1] = p; rgb[2] = v; break;
    default: rgb[0] = v; rgb[1] = p; rgb[2] = q; break;
  }
}

ImageF adjust_brightness(const ImageF& image, double delta) {
  return map_pixels(image, [delta](const float* in, float* out) {
    for (int c = 0; c < 3; ++c) out[c] = clip01(in[c] + delta);
  });
}

ImageF adjust_contrast(const ImageF& image, double delta) {
  const double m = image.mean();
  const double k = 1.0 + delta;
  return map_pixels(image, [m, k](const float* in, float* out) {
    for (int c = 0; c < 3; ++c) out[c] = clip01(m + k * (in[c] - m));
  });
}

ImageF adjust_saturation(const ImageF& image, double delta) {
  const double k = 1.0 + delta;
  return map_pixels(image, [k](const float* in, float* out) {
    float hsv[3];
    rgb_to_hsv(in, hsv);
    hsv[1] = clip01(hsv[1] * k);
    hsv_to_rgb(hsv, out);
    for (int c = 0; c < 3; ++c) out[c] = clip01(out[c]);
  });
}

ImageF adjust_hue(const ImageF& image, double delta) {
  return map_pixels(image, [delta](const float* in, float* out) {
    float hsv[3];
    rgb_to_hsv(in, hsv);
    double h = hsv[0] + delta;
    h -= std::floor(h);
    hsv[0] = static_cast<float>(h);
    hsv_to_rgb(hsv, out);
    for (int c = 0; c < 3; ++c) out[c] = clip01(out[c]);
  });
}

ImageF rotate(const ImageF& image, double degrees_clockwise) {
  if (image.width != image.height) throw ContractError("rotate: image must be square");
  const double turns = degrees_clockwise / 90.0;
  if (turns == std::round(turns)) {
    int q = static_cast<int>(std::fmod(std::round(turns), 4.0));
    if (q < 0) q += 4;
    return q == 0 ? image : rotate_quarter(image, q);
  }
  const int n = image.width;
  const double theta = degrees_clockwise * std::numbers::pi / 180.0;
  const double cs = std::cos(theta), sn = std::sin(theta);
  const double c0 = (n - 1) / 2.0;
  ImageF out(n, n);
  for (int y = 0; y < n; ++y) {
    for (int x = 0; x < n; ++x) {
      const double dx = x - c0, dy = y - c0;
      // Inverse of a clockwise (y-down) rotation.
      const double sx = c0 + dx * cs + dy * sn;
      const double sy = c0 - dx * sn + dy * cs;
      const int x0 = static_cast<int>(std::floor(sx));
      const int y0 = static_cast<int>(std::floor(sy));
      const double fx = sx - x0, fy = sy - y0;
      const float* p00 = image.at(reflect(x0, n), reflect(y0, n));
      const float* p10 = image.at(reflect(x0 + 1, n), reflect(y0, n));
      const float* p01 = image.at(reflect(x0, n), reflect(y0 + 1, n));
      const float* p11 = image.at(reflect(x0 + 1, n), reflect(y0 + 1, n));
      float* dst = out.at(x, y);
      for (int c = 0; c < 3; ++c) {
        const double top = p00[c] + fx * (p10[c] - p00[c]);
        const double bot = p01[c] + fx * (p11[c] - p01[c]);
        dst[c] = static_cast<float>(top + fy * (bot - top));
      }
    }
  }
  return out;
}

ImageF flip_vertical(const ImageF& image) {
  ImageF out(image.width, image.height);
  for (int y = 0; y < image.height; ++y)
    std::copy_n(image.at(0, image.height - 1 - y), 3 * image.width, out.at(0, y));
  return out;
}

ImageF flip_horizontal(const ImageF& image) {
  ImageF out(image.width, image.height);
  for (int y = 0; y < image.height; ++y)
    for (int x = 0; x < image.width; ++x) std::copy_n(image.at(image.width - 1 - x, y), 3, out.at(x, y));
  return out;
}

ImageF crop(const ImageF& image, int x, int y, int side) {
  if (x < 0 || y < 0 || x + side > image.width || y + side > image.height)
    throw ContractError("crop: window outside image");
  ImageF out(side, side);
  for (int r = 0; r < side; ++r) std::copy_n(image.at(x, y + r), 3 * side, out.at(0, r));
  return out;
}

ImageF center_crop(const ImageF& image, int side) {
  return crop(image, (image.width - side) / 2, (image.height - side) / 2, side);
}

double psnr(const ImageF& a, const ImageF& b) {
  if (a.width != b.width || a.height != b.height) throw ContractError("psnr: size mismatch");
  double se = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = static_cast<double>(a.data[i]) - b.data[i];
    se += d * d;
  }
  const double mse = se / static_cast<double>(a.data.size());
  if (mse == 0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(1.0 / mse);
}

}  // namespace histoage
