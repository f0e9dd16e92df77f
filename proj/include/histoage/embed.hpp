// Copyright 2026 The HistoAge Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace histoage {

using Points = std::vector<std::vector<double>>;

struct KMeansOptions {
  int restarts = 10;
  int max_iterations = 300;
};

struct KMeansResult {
  std::vector<int> assignment;
  Points centroids;
  double inertia = 0;
  int iterations = 0;
  /// Inertia after each Lloyd update of the winning restart.
  std::vector<double> trace;
  /// Final inertia of every restart, in restart order.
  std::vector<double> restart_inertia;
};

/// Lloyd's algorithm with k-means++ seeding; the best of `restarts` runs is
/// kept (first on ties). Empty clusters are re-seeded with the point farthest
/// from its centroid. Throws ContractError unless n >= k >= 1.
KMeansResult kmeans(const Points& points, int k, std::uint64_t seed, KMeansOptions options = {});

double inertia(const Points& points, const std::vector<int>& assignment, const Points& centroids);

/// Best inertia for k = 1..k_max (elbow diagnostic).
std::vector<double> inertia_curve(const Points& points, int k_max, std::uint64_t seed);

inline constexpr int kSlideClusters = 3;

struct SlideFeature {
  std::string slide_id;
  std::string scale_tag;  // "S1", "S2" or "S3"
  std::vector<double> values;
  /// Per block, in block order. A padded block has size 0.
  std::vector<int> cluster_sizes;

  bool padded() const;
  std::size_t block_width() const { return values.size() / cluster_sizes.size(); }
};

/// Cluster means ordered by size descending, then centroid norm descending,
/// then lexicographically; concatenated. With fewer than three clusters the
/// missing blocks are the slide-wide mean with size 0.
SlideFeature aggregate_slide(const std::string& slide_id, const std::string& scale_tag, const Points& embeddings,
                             const std::vector<int>& assignment);

/// Per-slide k-means (k = min(3, patches)) followed by aggregate_slide.
/// The seed is derived from the global seed and the slide id.
SlideFeature cluster_slide(const std::string& slide_id, const std::string& scale_tag, const Points& embeddings,
                           std::uint64_t global_seed);

/// S1 blocks then S2 blocks. Throws ContractError on different slide ids.
SlideFeature combine_scales(const SlideFeature& s1, const SlideFeature& s2);

struct CombinedScales {
  std::vector<SlideFeature> features;
  std::vector<std::string> excluded;  // one reason per slide left out
};

/// Pairs by slide id in S1 order; slides missing from either side are
/// excluded with a reason.
CombinedScales combine_all(const std::vector<SlideFeature>& s1, const std::vector<SlideFeature>& s2);

/// CSV `slide_id,scale_tag,cluster_sizes,g0..`; sizes joined with ';'.
void write_slide_features(const std::filesystem::path& path, const std::vector<SlideFeature>& features);
std::vector<SlideFeature> read_slide_features(const std::filesystem::path& path);

struct EmbeddingTable {
  std::string scale_tag;
  std::vector<std::string> patch_ids;
  std::vector<std::string> slide_ids;
  std::vector<std::vector<float>> rows;
};

/// CSV `patch_id,slide_id,scale_tag,f0..` plus an EMB1 binary twin when
/// `binary` is non-empty.
void write_embeddings(const std::filesystem::path& csv, const EmbeddingTable& table,
                      const std::filesystem::path& binary = {});
EmbeddingTable read_embeddings(const std::filesystem::path& csv);

}  // namespace histoage
