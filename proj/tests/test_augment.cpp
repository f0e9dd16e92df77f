// Copyright 2026 The HistoAge Authors.
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>

#include "histoage/augment.hpp"
#include "histoage/rng.hpp"

using namespace histoage;

namespace {

ImageF noise_image(int side, std::uint64_t seed) {
  Rng rng(seed);
  ImageF img(side, side);
  for (auto& v : img.data) v = static_cast<float>(rng.uniform());
  return img;
}

AugmentPolicy small_policy(int crop) {
  AugmentPolicy p;
  p.crop_side = crop;
  return p;
}

}  // namespace

TEST_SUITE("augment") {

TEST_CASE("all probabilities zero gives the top-left crop for both views") {
  const auto img = noise_image(40, 1);
  auto policy = AugmentPolicy::uniform(0.0);
  policy.crop_side = 32;
  const auto pair = augment_pair(img, policy, 99);
  const auto ref = crop(img, 0, 0, 32);
  CHECK(pair.v1 == ref);
  CHECK(pair.v2 == ref);
  CHECK(std::isinf(psnr(pair.v1, ref)));
}

TEST_CASE("per-transform firing rates") {
  const auto img = noise_image(20, 2);
  const auto policy = small_policy(16);
  const int n = 10000;
  int crop = 0, bright = 0, rot1 = 0, rot2 = 0, flip1 = 0, flip2 = 0, con = 0, sat = 0, hue = 0;
  for (int i = 0; i < n; ++i) {
    const auto p = augment_pair(img, policy, static_cast<std::uint64_t>(i));
    crop += p.t1.crop;
    bright += p.t2.brightness;
    rot1 += p.t1.rotation;
    rot2 += p.t2.rotation;
    flip1 += p.t1.flip;
    flip2 += p.t2.flip;
    con += p.t1.contrast;
    sat += p.t2.saturation;
    hue += p.t1.hue;
  }
  const double sigma = std::sqrt(0.75 * 0.25 / n);
  for (int count : {crop, bright, rot1, rot2, flip1, flip2, con, sat, hue}) {
    CAPTURE(count);
    CHECK(std::abs(count / static_cast<double>(n) - 0.75) <= 3 * sigma);
  }
}

TEST_CASE("view signs and magnitude ranges") {
  const auto img = noise_image(20, 3);
  const auto policy = small_policy(16);
  for (int i = 0; i < 2000; ++i) {
    const auto p = augment_pair(img, policy, static_cast<std::uint64_t>(i) * 7919);
    if (p.t1.rotation) CHECK((p.t1.rotation_deg_clockwise > 0 && p.t1.rotation_deg_clockwise <= 90));
    if (p.t2.rotation) CHECK((p.t2.rotation_deg_clockwise < 0 && p.t2.rotation_deg_clockwise >= -180));
    if (p.t1.contrast) CHECK((p.t1.contrast_delta >= 0 && p.t1.contrast_delta <= 1.9));
    if (p.t2.contrast) CHECK((p.t2.contrast_delta <= 0 && p.t2.contrast_delta >= -2.5));
    if (p.t1.saturation) CHECK((p.t1.saturation_delta >= 0 && p.t1.saturation_delta <= 1.1));
    if (p.t2.saturation) CHECK((p.t2.saturation_delta <= 0 && p.t2.saturation_delta >= -0.75));
    if (p.t1.hue) CHECK(p.t1.hue_delta == doctest::Approx(0.01));
    if (p.t2.hue) CHECK(p.t2.hue_delta == doctest::Approx(-0.01));
    for (const auto* t : {&p.t1, &p.t2}) {
      if (t->brightness) CHECK(std::abs(t->brightness_delta) <= 0.75);
      CHECK((t->crop_x >= 0 && t->crop_x <= 4 && t->crop_y >= 0 && t->crop_y <= 4));
    }
    for (float v : p.v1.data) REQUIRE((v >= 0.0f && v <= 1.0f));
    for (float v : p.v2.data) REQUIRE((v >= 0.0f && v <= 1.0f));
  }
}

TEST_CASE("deterministic in seed, different across seeds") {
  const auto img = noise_image(40, 4);
  const auto policy = small_policy(32);
  const auto a = augment_pair(img, policy, 12345);
  const auto b = augment_pair(img, policy, 12345);
  CHECK(a.v1 == b.v1);
  CHECK(a.v2 == b.v2);
  const auto c = augment_pair(img, policy, 12346);
  CHECK_FALSE((c.v1 == a.v1 && c.v2 == a.v2));
}

TEST_CASE("geometric transforms") {
  const auto img = noise_image(9, 5);
  const auto r90 = rotate(img, 90);
  // Clockwise: the top-left pixel moves to the top-right.
  for (int c = 0; c < 3; ++c) CHECK(r90.at(8, 0)[c] == img.at(0, 0)[c]);
  CHECK(rotate(rotate(rotate(rotate(img, 90), 90), 90), 90) == img);
  CHECK(rotate(img, 180) == rotate(r90, 90));
  CHECK(rotate(img, -90) == rotate(img, 270));
  CHECK(rotate(img, 0) == img);
  CHECK(flip_vertical(flip_vertical(img)) == img);
  CHECK(flip_horizontal(flip_horizontal(img)) == img);
  for (int c = 0; c < 3; ++c) {
    CHECK(flip_vertical(img).at(2, 0)[c] == img.at(2, 8)[c]);
    CHECK(flip_horizontal(img).at(0, 3)[c] == img.at(8, 3)[c]);
  }
  // Small rotations stay close to the original.
  const auto big = noise_image(64, 6);
  CHECK(psnr(rotate(big, 0.01), big) > 40);
  CHECK(center_crop(big, 32) == crop(big, 16, 16, 32));
  CHECK_THROWS_AS(crop(big, 40, 0, 32), ContractError);
}

TEST_CASE("color transforms") {
  ImageF img(2, 1);
  img.data = {0.2f, 0.4f, 0.6f, 0.8f, 0.6f, 0.4f};
  const auto b = adjust_brightness(img, 0.3);
  CHECK(b.data[0] == doctest::Approx(0.5));
  CHECK(b.data[3] == doctest::Approx(1.0));
  const auto c = adjust_contrast(img, 1.0);  // mean 0.5, doubled spread
  CHECK(c.data[0] == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(c.data[1] == doctest::Approx(0.3));
  CHECK(c.data[3] == doctest::Approx(1.0));
  const auto flat = adjust_contrast(img, -1.0);
  for (float v : flat.data) CHECK(v == doctest::Approx(0.5));
  const auto gray = adjust_saturation(img, -1.0);
  CHECK(gray.data[0] == doctest::Approx(gray.data[2]));
  CHECK(gray.data[3] == doctest::Approx(gray.data[5]));

  Rng rng(7);
  for (int i = 0; i < 1000; ++i) {
    float rgb[3] = {static_cast<float>(rng.uniform()), static_cast<float>(rng.uniform()),
                    static_cast<float>(rng.uniform())};
    float hsv[3], back[3];
    rgb_to_hsv(rgb, hsv);
    hsv_to_rgb(hsv, back);
    for (int k = 0; k < 3; ++k) CHECK(back[k] == doctest::Approx(rgb[k]).epsilon(1e-5));
  }
  // Hue wraps: a full turn is the identity, and +d then -d returns.
  const auto noise = noise_image(8, 8);
  const auto there = adjust_hue(adjust_hue(noise, 0.01), -0.01);
  for (std::size_t i = 0; i < noise.data.size(); ++i) CHECK(there.data[i] == doctest::Approx(noise.data[i]).epsilon(1e-4));
  const auto full = adjust_hue(noise, 1.0);
  for (std::size_t i = 0; i < noise.data.size(); ++i) CHECK(full.data[i] == doctest::Approx(noise.data[i]).epsilon(1e-5));
}

TEST_CASE("policy validation") {
  auto p = AugmentPolicy::uniform(0.5);
  CHECK(p.v2.p_hue == 0.5);
  CHECK(p.p_crop == 0.5);
  p.v1.p_flip = 1.5;
  CHECK_THROWS_AS(p.validate(), ContractError);
  auto q = AugmentPolicy{};
  q.v2.contrast_max = -1;
  CHECK_THROWS_AS(q.validate(), ContractError);
  CHECK_THROWS_AS(augment_pair(noise_image(100, 1), AugmentPolicy{}, 1), ContractError);
}

}  // TEST_SUITE
