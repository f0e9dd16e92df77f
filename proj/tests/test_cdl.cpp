// Copyright 2026 The HistoAge Authors.
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <cstring>
#include <filesystem>

#include "gradcheck.hpp"
#include "histoage/cdl.hpp"

using namespace histoage;
using namespace histoage::testing;

namespace {

// Stained-looking 40x40 patches: a tinted background with a few discs.
std::vector<Image8> blob_patches(std::size_t n, std::uint64_t seed, int side = 40) {
  Rng rng(seed);
  std::vector<Image8> out;
  for (std::size_t i = 0; i < n; ++i) {
    Image8 img(side, side, 3);
    const int r = 180 + static_cast<int>(rng.below(60)), g = 100 + static_cast<int>(rng.below(60)),
              b = 150 + static_cast<int>(rng.below(60));
    for (int y = 0; y < side; ++y)
      for (int x = 0; x < side; ++x) {
        auto* p = img.at(x, y);
        p[0] = static_cast<std::uint8_t>(r);
        p[1] = static_cast<std::uint8_t>(g);
        p[2] = static_cast<std::uint8_t>(b);
      }
    const int discs = 1 + static_cast<int>(rng.below(4));
    for (int d = 0; d < discs; ++d) {
      const double cx = rng.uniform(0, side), cy = rng.uniform(0, side), rad = rng.uniform(3, 10);
      const auto shade = static_cast<std::uint8_t>(40 + rng.below(80));
      for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x)
          if ((x - cx) * (x - cx) + (y - cy) * (y - cy) < rad * rad) {
            auto* p = img.at(x, y);
            p[0] = shade;
            p[1] = static_cast<std::uint8_t>(shade / 2);
            p[2] = static_cast<std::uint8_t>(shade + 60);
          }
    }
    out.push_back(std::move(img));
  }
  return out;
}

CdlTrainConfig small_config(std::size_t epochs, std::uint64_t seed) {
  CdlTrainConfig c;
  c.encoder.widths = {4, 8, 8};
  c.encoder.depths = {1, 1, 1};
  c.encoder.input_side = 32;
  c.encoder.embed_dim = 16;
  c.augment.crop_side = 32;
  c.epochs = epochs;
  c.batch_size = 10;
  c.sgd.learning_rate = 0.05;
  c.seed = seed;
  return c;
}

bool same_store(const ad::ParameterStore<float>& a, const ad::ParameterStore<float>& b) {
  if (a.parameters().size() != b.parameters().size()) return false;
  for (std::size_t i = 0; i < a.parameters().size(); ++i)
    if (!(a.parameters()[i].value == b.parameters()[i].value)) return false;
  for (std::size_t i = 0; i < a.buffers().size(); ++i)
    if (!(a.buffers()[i].value == b.buffers()[i].value)) return false;
  return true;
}

}  // namespace

TEST_SUITE("cdl") {

TEST_CASE("cosine loss examples") {
  const std::vector<double> a{1, 0}, b{0, 1}, c{-2, 0}, d{3, 0}, zero{0, 0};
  CHECK(cosine_loss(a, d) == doctest::Approx(-1.0));
  CHECK(cosine_loss(a, b) == doctest::Approx(0.0));
  CHECK(cosine_loss(a, c) == doctest::Approx(1.0));
  const std::vector<double> e{1, 1};
  CHECK(cosine_loss(a, e) == doctest::Approx(-1.0 / std::sqrt(2.0)));
  CHECK_THROWS_AS(cosine_loss(a, zero), NumericError);
  // Scale invariant in either argument.
  Rng rng(1);
  for (int i = 0; i < 100; ++i) {
    std::vector<double> p(5), z(5);
    for (auto& v : p) v = rng.normal();
    for (auto& v : z) v = rng.normal();
    const double base = cosine_loss(p, z);
    CHECK(base >= -1.0 - 1e-12);
    CHECK(base <= 1.0 + 1e-12);
    auto z3 = z;
    for (auto& v : z3) v *= 3.7;
    CHECK(cosine_loss(p, z3) == doctest::Approx(base));
  }
}

TEST_CASE("defaults and collapse threshold") {
  CHECK(default_embed_dim(ScaleTag::kS1) == 512);
  CHECK(default_embed_dim(ScaleTag::kS2) == 128);
  CHECK(collapse_threshold(512) == doctest::Approx(0.01 / std::sqrt(512.0)));
  CHECK(normalized_embedding_std({{1, 0}, {0, 1}}) == doctest::Approx(0.5));
  CHECK(normalized_embedding_std({{2, 0}, {5, 0}}) == doctest::Approx(0.0));
}

TEST_CASE("data-parallel loss matches the single-tape reference") {
  const auto batch = random_pairs(4, 21);
  const auto net = live_tiny_network(batch, 20);
  auto a = net;
  auto b = net;
  const auto dp = cdl_loss_and_gradients(a, batch);
  const auto ref = cdl_loss_single_tape(b, batch);
  CHECK(dp.loss == doctest::Approx(ref.loss).epsilon(1e-12));
  REQUIRE(dp.grads.size() == ref.grads.size());
  double worst = 0;
  for (std::size_t i = 0; i < dp.grads.size(); ++i)
    for (std::size_t k = 0; k < dp.grads[i].size(); ++k)
      worst = std::max(worst, std::abs(dp.grads[i].data()[k] - ref.grads[i].data()[k]));
  CHECK(worst < 1e-12);
  // Batch-norm running statistics move identically.
  for (std::size_t i = 0; i < a.store().buffers().size(); ++i)
    for (std::size_t k = 0; k < a.store().buffers()[i].value.size(); ++k)
      CHECK(a.store().buffers()[i].value.data()[k] ==
            doctest::Approx(b.store().buffers()[i].value.data()[k]).epsilon(1e-12));
}

TEST_CASE("activation recomputation gives identical gradients") {
  const auto batch = random_pairs(3, 31);
  const auto net = live_tiny_network(batch, 30);
  auto a = net;
  auto b = net;
  const auto x = cdl_loss_and_gradients(a, batch, false);
  const auto y = cdl_loss_and_gradients(b, batch, true);
  CHECK(std::memcmp(&x.loss, &y.loss, sizeof(double)) == 0);
  for (std::size_t i = 0; i < x.grads.size(); ++i) CHECK(x.grads[i] == y.grads[i]);
}

TEST_CASE("data-parallel gradients agree with finite differences") {
  const auto batch = random_pairs(3, 41);
  auto net = live_tiny_network(batch, 40);
  CHECK(cdl_gradient_error(net, batch) < 1e-4);
}

TEST_CASE("a non-finite batch leaves the parameters untouched") {
  auto pairs = random_pairs(2, 51);
  auto net = live_tiny_network(pairs, 50).cast<float>();
  const auto before = net.store().parameters();
  pairs[0].v1.data[5] = std::nanf("");
  ad::Sgd<float> opt(ad::SgdConfig{});
  CHECK_THROWS_AS(cdl_step(net, opt, pairs, 0.1, {0, 0}), NumericError);
  for (std::size_t i = 0; i < before.size(); ++i) CHECK(before[i].value == net.store().parameters()[i].value);
}

TEST_CASE("training is deterministic for a fixed seed") {
  const auto patches = blob_patches(50, 60);
  const auto c = small_config(3, 7);
  const auto a = train_cdl(patches, c);
  const auto b = train_cdl(patches, c);
  REQUIRE(a.epochs.size() == 3);
  for (std::size_t e = 0; e < 3; ++e) CHECK(std::memcmp(&a.epochs[e].loss, &b.epochs[e].loss, sizeof(double)) == 0);
  CHECK(same_store(a.network.store(), b.network.store()));
  const auto other = train_cdl(patches, small_config(3, 8));
  CHECK_FALSE(same_store(a.network.store(), other.network.store()));
}

TEST_CASE("training lowers the loss and keeps embeddings spread") {
  const auto patches = blob_patches(60, 70);
  const auto r = train_cdl(patches, small_config(12, 3));
  REQUIRE(r.epochs.size() == 12);
  for (const auto& e : r.epochs) REQUIRE_FALSE(e.aborted);
  const double first = r.epochs.front().loss, last = r.epochs.back().loss;
  CAPTURE(first);
  CAPTURE(last);
  CHECK(last < first);
  CHECK(last >= -1.0);
  CHECK_FALSE(r.collapse_detected);
  CHECK(r.epochs.back().learning_rate < r.epochs.front().learning_rate);
}

TEST_CASE("collapse monitor fires on identical inputs") {
  std::vector<Image8> same(12, Image8(40, 40, 3, 150));
  auto c = small_config(4, 5);
  c.augment = AugmentPolicy::uniform(0.0);
  c.augment.crop_side = 32;
  c.collapse_patience = 2;
  const auto r = train_cdl(same, c);
  bool any_aborted = false;
  for (const auto& e : r.epochs) any_aborted = any_aborted || e.aborted;
  // Either every embedding row is identical (std 0) or a zero norm aborts.
  CHECK((r.collapse_detected || any_aborted));
  CHECK_FALSE(r.warnings.empty());
}

TEST_CASE("training rejects bad configurations") {
  const auto patches = blob_patches(4, 1);
  auto c = small_config(1, 1);
  c.batch_size = 1;
  CHECK_THROWS_AS(train_cdl(patches, c), ConfigError);
  c = small_config(0, 1);
  CHECK_THROWS_AS(train_cdl(patches, c), ConfigError);
  CHECK_THROWS_AS(train_cdl(std::vector<Image8>{}, small_config(1, 1)), ContractError);
  CHECK_THROWS_AS(train_cdl(blob_patches(4, 1, 20), small_config(1, 1)), ShapeError);
}

TEST_CASE("feature extraction: deterministic, per-patch, checkpoint round trip") {
  const auto patches = blob_patches(12, 80);
  auto r = train_cdl(patches, small_config(1, 9));
  auto f1 = extract_features(r.network, patches);
  auto f2 = extract_features(r.network, patches);
  REQUIRE(f1.size() == 12);
  CHECK(f1 == f2);
  CHECK(f1[0].size() == 16);
  // Eval-mode features do not depend on which other patches are present.
  const std::vector<Image8> tail(patches.begin() + 5, patches.end());
  const auto f3 = extract_features(r.network, tail);
  for (std::size_t i = 0; i < tail.size(); ++i) CHECK(f3[i] == f1[i + 5]);

  const auto path = std::filesystem::temp_directory_path() / "histoage_cdl_test.cdl";
  save_checkpoint(path, r.network, ScaleTag::kS1);
  const auto ck = load_checkpoint(path);
  CHECK(ck.scale == ScaleTag::kS1);
  CHECK(same_store(ck.network.store(), r.network.store()));
  CHECK(extract_features(ck, patches, ScaleTag::kS1) == f1);
  CHECK_THROWS_AS(extract_features(ck, patches, ScaleTag::kS2), ContractError);
  std::filesystem::remove(path);
}

}  // TEST_SUITE
