// Copyright 2026 The HistoAge Authors.
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <limits>

#include "histoage/embed.hpp"
#include "histoage/error.hpp"
#include "histoage/rng.hpp"

using namespace histoage;

namespace {

Points random_points(std::size_t n, std::size_t d, Rng& rng) {
  Points p(n, std::vector<double>(d));
  for (auto& row : p)
    for (auto& v : row) v = rng.normal();
  return p;
}

// Exhaustive optimum over all assignments with every cluster non-empty.
double brute_force_inertia(const Points& pts, int k) {
  const std::size_t n = pts.size(), d = pts[0].size();
  std::vector<int> a(n, 0);
  double best = std::numeric_limits<double>::infinity();
  for (;;) {
    std::vector<std::vector<double>> sum(k, std::vector<double>(d, 0));
    std::vector<int> count(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      ++count[a[i]];
      for (std::size_t j = 0; j < d; ++j) sum[a[i]][j] += pts[i][j];
    }
    if (std::all_of(count.begin(), count.end(), [](int c) { return c > 0; })) {
      double total = 0;
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) {
          const double diff = pts[i][j] - sum[a[i]][j] / count[a[i]];
          total += diff * diff;
        }
      best = std::min(best, total);
    }
    std::size_t pos = 0;
    while (pos < n && ++a[pos] == k) a[pos++] = 0;
    if (pos == n) break;
  }
  return best;
}

}  // namespace

TEST_SUITE("embed") {

TEST_CASE("k-means matches brute force on small sets") {
  Rng rng(1);
  int optimal = 0;
  const int trials = 30;
  for (int t = 0; t < trials; ++t) {
    const auto pts = random_points(8, 2, rng);
    for (int k = 2; k <= 3; ++k) {
      const auto r = kmeans(pts, k, static_cast<std::uint64_t>(t));
      const double best = brute_force_inertia(pts, k);
      CHECK(r.inertia >= best - 1e-9);
      if (r.inertia <= best + 1e-9) ++optimal;
    }
  }
  // Ten restarts find the global optimum on nearly every tiny instance.
  CHECK(optimal >= 2 * trials - 3);
}

TEST_CASE("k-means fixed-point properties") {
  Rng rng(2);
  for (int t = 0; t < 20; ++t) {
    const auto pts = random_points(60, 4, rng);
    const int k = 2 + static_cast<int>(rng.below(4));
    const auto r = kmeans(pts, k, 100 + t);
    REQUIRE(r.assignment.size() == pts.size());
    REQUIRE(r.centroids.size() == static_cast<std::size_t>(k));
    CHECK(r.restart_inertia.size() == 10);
    CHECK(r.inertia == doctest::Approx(*std::min_element(r.restart_inertia.begin(), r.restart_inertia.end())));
    CHECK(r.inertia == doctest::Approx(inertia(pts, r.assignment, r.centroids)));
    for (std::size_t i = 1; i < r.trace.size(); ++i) CHECK(r.trace[i] <= r.trace[i - 1] + 1e-9);
    // Converged: every point sits with its nearest centroid.
    for (std::size_t i = 0; i < pts.size(); ++i) {
      auto dist = [&](int c) {
        double s = 0;
        for (std::size_t j = 0; j < 4; ++j) s += (pts[i][j] - r.centroids[c][j]) * (pts[i][j] - r.centroids[c][j]);
        return s;
      };
      for (int c = 0; c < k; ++c) CHECK(dist(r.assignment[i]) <= dist(c) + 1e-9);
    }
    const auto again = kmeans(pts, k, 100 + t);
    CHECK(again.assignment == r.assignment);
  }
}

TEST_CASE("k-means edge cases") {
  const Points three{{0, 0}, {1, 1}, {5, 5}};
  CHECK_THROWS_AS(kmeans(three, 4, 1), ContractError);
  CHECK_THROWS_AS(kmeans(three, 0, 1), ContractError);
  const auto r = kmeans(three, 3, 1);
  CHECK(r.inertia == doctest::Approx(0.0));
  const Points dup{{1, 1}, {1, 1}, {1, 1}, {2, 2}};
  const auto d = kmeans(dup, 3, 1);
  CHECK(d.inertia == doctest::Approx(0.0));
}

TEST_CASE("inertia curve decreases towards zero") {
  Rng rng(3);
  const auto pts = random_points(12, 3, rng);
  const auto curve = inertia_curve(pts, 12, 4);
  REQUIRE(curve.size() == 12);
  for (std::size_t i = 1; i < curve.size(); ++i) CHECK(curve[i] <= curve[i - 1] + 1e-9);
  CHECK(curve.back() == doctest::Approx(0.0));
}

TEST_CASE("aggregation orders blocks by size") {
  const Points e{{0, 0}, {10, 0}, {10, 2}, {0, 4}, {0, 6}, {0, 8}};
  const std::vector<int> assign{2, 0, 0, 1, 1, 1};
  const auto f = aggregate_slide("S", "S1", e, assign);
  CHECK(f.cluster_sizes == std::vector<int>{3, 2, 1});
  CHECK(f.values == std::vector<double>{0, 6, 10, 1, 0, 0});
  CHECK_FALSE(f.padded());
  CHECK(f.block_width() == 2);

  // Equal sizes: larger centroid norm first.
  const Points t{{1, 0}, {3, 0}};
  const auto g = aggregate_slide("T", "S1", t, {0, 1});
  CHECK(g.values == std::vector<double>{3, 0, 1, 0, 2, 0});
  CHECK(g.cluster_sizes == std::vector<int>{1, 1, 0});
  CHECK(g.padded());
}

TEST_CASE("per-slide clustering with few patches") {
  const Points one{{1, 2}};
  const auto f = cluster_slide("A", "S2", one, 5);
  CHECK(f.values == std::vector<double>{1, 2, 1, 2, 1, 2});
  CHECK(f.cluster_sizes == std::vector<int>{1, 0, 0});
  Rng rng(4);
  const auto pts = random_points(30, 5, rng);
  const auto a = cluster_slide("A", "S1", pts, 5);
  const auto b = cluster_slide("A", "S1", pts, 5);
  CHECK(a.values == b.values);
  CHECK(a.values.size() == 15);
  int total = 0;
  for (int s : a.cluster_sizes) total += s;
  CHECK(total == 30);
}

TEST_CASE("combining scales") {
  SlideFeature a{"X", "S1", std::vector<double>(6, 1.0), {2, 1, 1}};
  SlideFeature b{"X", "S2", std::vector<double>(3, 2.0), {1, 1, 0}};
  const auto c = combine_scales(a, b);
  CHECK(c.scale_tag == "S3");
  CHECK(c.values.size() == 9);
  CHECK(c.values[6] == 2.0);
  CHECK(c.cluster_sizes == std::vector<int>{2, 1, 1, 1, 1, 0});
  SlideFeature other{"Y", "S2", std::vector<double>(3, 2.0), {1, 1, 1}};
  CHECK_THROWS_AS(combine_scales(a, other), ContractError);

  SlideFeature z{"Z", "S1", std::vector<double>(6, 0.0), {1, 1, 1}};
  const auto all = combine_all({a, z}, {other, b});
  REQUIRE(all.features.size() == 1);
  CHECK(all.features[0].slide_id == "X");
  CHECK(all.excluded.size() == 2);
}

TEST_CASE("feature and embedding files round trip") {
  const auto dir = std::filesystem::temp_directory_path() / "histoage_embed_test";
  std::filesystem::create_directories(dir);
  Rng rng(5);
  std::vector<SlideFeature> feats;
  for (int i = 0; i < 4; ++i) {
    SlideFeature f{"S" + std::to_string(i), "S1", {}, {3, 2, i == 0 ? 0 : 1}};
    for (int j = 0; j < 9; ++j) f.values.push_back(rng.normal() * 1e3);
    feats.push_back(f);
  }
  write_slide_features(dir / "f.csv", feats);
  const auto back = read_slide_features(dir / "f.csv");
  REQUIRE(back.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(back[i].slide_id == feats[i].slide_id);
    CHECK(back[i].values == feats[i].values);
    CHECK(back[i].cluster_sizes == feats[i].cluster_sizes);
  }

  EmbeddingTable t{"S2", {"p0", "p1"}, {"s0", "s0"}, {{0.1f, -2.5e-7f, 3.0f}, {1.0f / 3.0f, 7.0f, -0.0f}}};
  write_embeddings(dir / "e.csv", t, dir / "e.emb");
  CHECK(std::filesystem::exists(dir / "e.emb"));
  const auto e = read_embeddings(dir / "e.csv");
  CHECK(e.scale_tag == "S2");
  CHECK(e.patch_ids == t.patch_ids);
  CHECK(e.slide_ids == t.slide_ids);
  CHECK(e.rows == t.rows);
  std::filesystem::remove_all(dir);
}

}  // TEST_SUITE
