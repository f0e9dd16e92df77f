// Copyright 2026 The HistoAge Authors.
// SPDX-License-Identifier: Apache-2.0

#include "histoage/embed.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numeric>

#include "histoage/checkpoint.hpp"
#include "histoage/error.hpp"
#include "histoage/io.hpp"
#include "histoage/rng.hpp"

namespace histoage {

namespace {

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double s = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

Points seed_plus_plus(const Points& points, int k, Rng& rng) {
  const std::size_t n = points.size();
  Points centers;
  centers.push_back(points[rng.below(n)]);
  std::vector<double> d2(n);
  for (std::size_t i = 0; i < n; ++i) d2[i] = sq_dist(points[i], centers[0]);
  while (static_cast<int>(centers.size()) < k) {
    const double total = std::accumulate(d2.begin(), d2.end(), 0.0);
    std::size_t pick = n - 1;
    if (total > 0) {
      const double r = rng.uniform() * total;
      double acc = 0;
      for (std::size_t i = 0; i < n; ++i) {
        acc += d2[i];
        if (r < acc) {
          pick = i;
          break;
        }
      }
    } else {
      pick = rng.below(n);
    }
    centers.push_back(points[pick]);
    for (std::size_t i = 0; i < n; ++i) d2[i] = std::min(d2[i], sq_dist(points[i], centers.back()));
  }
  return centers;
}

int nearest(const std::vector<double>& p, const Points& centers) {
  int best = 0;
  double bd = std::numeric_limits<double>::infinity();
  for (std::size_t c = 0; c < centers.size(); ++c) {
    const double d = sq_dist(p, centers[c]);
    if (d < bd) {
      bd = d;
      best = static_cast<int>(c);
    }
  }
  return best;
}

Points update_centroids(const Points& points, std::vector<int>& assign, Points centers) {
  const std::size_t k = centers.size(), d = points.front().size();
  for (;;) {
    std::vector<std::size_t> count(k, 0);
    Points sums(k, std::vector<double>(d, 0.0));
    for (std::size_t i = 0; i < points.size(); ++i) {
      ++count[assign[i]];
      for (std::size_t j = 0; j < d; ++j) sums[assign[i]][j] += points[i][j];
    }
    const auto empty = std::find(count.begin(), count.end(), std::size_t{0});
    if (empty == count.end()) {
      for (std::size_t c = 0; c < k; ++c)
        for (std::size_t j = 0; j < d; ++j) centers[c][j] = sums[c][j] / static_cast<double>(count[c]);
      return centers;
    }
    // Re-seed: the point farthest from its centroid among clusters that can spare one.
    std::size_t far = points.size();
    double fd = -1;
    for (std::size_t i = 0; i < points.size(); ++i) {
      if (count[assign[i]] < 2) continue;
      const double dd = sq_dist(points[i], centers[assign[i]]);
      if (dd > fd) {
        fd = dd;
        far = i;
      }
    }
    const auto e = static_cast<std::size_t>(empty - count.begin());
    assign[far] = static_cast<int>(e);
    centers[e] = points[far];
  }
}

}  // namespace

double inertia(const Points& points, const std::vector<int>& assignment, const Points& centroids) {
  double s = 0;
  for (std::size_t i = 0; i < points.size(); ++i) s += sq_dist(points[i], centroids[assignment[i]]);
  return s;
}

KMeansResult kmeans(const Points& points, int k, std::uint64_t seed, KMeansOptions options) {
  if (k < 1) throw ContractError("kmeans: k must be >= 1");
  if (points.size() < static_cast<std::size_t>(k))
    throw ContractError("kmeans: " + std::to_string(points.size()) + " points for k = " + std::to_string(k));
  const std::size_t d = points.front().size();
  for (const auto& p : points)
    if (p.size() != d) throw ShapeError("kmeans: ragged points");
  if (options.restarts < 1 || options.max_iterations < 1)
    throw ConfigError("kmeans", "restarts and max_iterations must be >= 1");

  KMeansResult best;
  best.inertia = std::numeric_limits<double>::infinity();
  std::vector<double> restart_inertia;
  for (int r = 0; r < options.restarts; ++r) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(r)));
    KMeansResult run;
    run.centroids = seed_plus_plus(points, k, rng);
    run.assignment.assign(points.size(), -1);
    for (int it = 0; it < options.max_iterations; ++it) {
      std::vector<int> next(points.size());
      for (std::size_t i = 0; i < points.size(); ++i) next[i] = nearest(points[i], run.centroids);
      const bool stable = next == run.assignment;
      if (stable && it > 0) break;
      run.assignment = std::move(next);
      run.centroids = update_centroids(points, run.assignment, std::move(run.centroids));
      run.trace.push_back(inertia(points, run.assignment, run.centroids));
      run.iterations = it + 1;
    }
    run.inertia = run.trace.back();
    restart_inertia.push_back(run.inertia);
    if (run.inertia < best.inertia) best = std::move(run);
  }
  best.restart_inertia = std::move(restart_inertia);
  return best;
}

std::vector<double> inertia_curve(const Points& points, int k_max, std::uint64_t seed) {
  std::vector<double> out;
  const int top = std::min<int>(k_max, static_cast<int>(points.size()));
  for (int k = 1; k <= top; ++k) out.push_back(kmeans(points, k, derive_seed(seed, static_cast<std::uint64_t>(k))).inertia);
  return out;
}

bool SlideFeature::padded() const {
  return std::find(cluster_sizes.begin(), cluster_sizes.end(), 0) != cluster_sizes.end();
}

SlideFeature aggregate_slide(const std::string& slide_id, const std::string& scale_tag, const Points& embeddings,
                             const std::vector<int>& assignment) {
  if (embeddings.empty()) throw ContractError("aggregate_slide: slide " + slide_id + " has no patches");
  if (assignment.size() != embeddings.size()) throw ShapeError("aggregate_slide: assignment length mismatch");
  const std::size_t d = embeddings.front().size();
  std::map<int, std::pair<std::size_t, std::vector<double>>> groups;
  std::vector<double> global(d, 0.0);
  for (std::size_t i = 0; i < embeddings.size(); ++i) {
    if (embeddings[i].size() != d) throw ShapeError("aggregate_slide: ragged embeddings");
    auto& g = groups[assignment[i]];
    if (g.second.empty()) g.second.assign(d, 0.0);
    ++g.first;
    for (std::size_t j = 0; j < d; ++j) {
      g.second[j] += embeddings[i][j];
      global[j] += embeddings[i][j];
    }
  }
  if (groups.size() > kSlideClusters) throw ContractError("aggregate_slide: more than 3 clusters");
  struct Block {
    std::size_t size;
    double norm;
    std::vector<double> mean;
  };
  std::vector<Block> blocks;
  for (auto& [label, g] : groups) {
    Block b{g.first, 0.0, std::move(g.second)};
    for (auto& v : b.mean) v /= static_cast<double>(b.size);
    for (const double v : b.mean) b.norm += v * v;
    b.norm = std::sqrt(b.norm);
    blocks.push_back(std::move(b));
  }
  std::sort(blocks.begin(), blocks.end(), [](const Block& a, const Block& b) {
    if (a.size != b.size) return a.size > b.size;
    if (a.norm != b.norm) return a.norm > b.norm;
    return a.mean < b.mean;
  });
  for (auto& v : global) v /= static_cast<double>(embeddings.size());
  while (blocks.size() < kSlideClusters) blocks.push_back({0, 0.0, global});

  SlideFeature out{slide_id, scale_tag, {}, {}};
  for (const auto& b : blocks) {
    out.values.insert(out.values.end(), b.mean.begin(), b.mean.end());
    out.cluster_sizes.push_back(static_cast<int>(b.size));
  }
  return out;
}

SlideFeature cluster_slide(const std::string& slide_id, const std::string& scale_tag, const Points& embeddings,
                           std::uint64_t global_seed) {
  if (embeddings.empty()) throw ContractError("cluster_slide: slide " + slide_id + " has no patches");
  const int k = std::min<int>(kSlideClusters, static_cast<int>(embeddings.size()));
  const auto fit = kmeans(embeddings, k, derive_seed(global_seed, slide_id));
  return aggregate_slide(slide_id, scale_tag, embeddings, fit.assignment);
}

SlideFeature combine_scales(const SlideFeature& s1, const SlideFeature& s2) {
  if (s1.slide_id != s2.slide_id)
    throw ContractError("combine_scales: slide ids differ (" + s1.slide_id + " vs " + s2.slide_id + ")");
  SlideFeature out{s1.slide_id, "S3", s1.values, s1.cluster_sizes};
  out.values.insert(out.values.end(), s2.values.begin(), s2.values.end());
  out.cluster_sizes.insert(out.cluster_sizes.end(), s2.cluster_sizes.begin(), s2.cluster_sizes.end());
  return out;
}

CombinedScales combine_all(const std::vector<SlideFeature>& s1, const std::vector<SlideFeature>& s2) {
  std::map<std::string, const SlideFeature*> by_id;
  for (const auto& f : s2) by_id[f.slide_id] = &f;
  CombinedScales out;
  for (const auto& f : s1) {
    const auto it = by_id.find(f.slide_id);
    if (it == by_id.end()) {
      out.excluded.push_back(f.slide_id + ": no S2 feature");
      continue;
    }
    out.features.push_back(combine_scales(f, *it->second));
    by_id.erase(it);
  }
  for (const auto& [id, f] : by_id) out.excluded.push_back(id + ": no S1 feature");
  return out;
}

void write_slide_features(const std::filesystem::path& path, const std::vector<SlideFeature>& features) {
  CsvTable t;
  t.header = {"slide_id", "scale_tag", "cluster_sizes"};
  const std::size_t width = features.empty() ? 0 : features.front().values.size();
  for (std::size_t j = 0; j < width; ++j) t.header.push_back("g" + std::to_string(j));
  for (const auto& f : features) {
    if (f.values.size() != width) throw ShapeError("write_slide_features: ragged feature lengths");
    std::string sizes;
    for (std::size_t c = 0; c < f.cluster_sizes.size(); ++c) sizes += (c ? ";" : "") + std::to_string(f.cluster_sizes[c]);
    std::vector<std::string> row{f.slide_id, f.scale_tag, sizes};
    for (const double v : f.values) row.push_back(format_number(v));
    t.rows.push_back(std::move(row));
  }
  write_csv(path, t);
}

std::vector<SlideFeature> read_slide_features(const std::filesystem::path& path) {
  const auto t = read_csv(path);
  std::vector<SlideFeature> out;
  for (const auto& row : t.rows) {
    if (row.size() < 3) throw ContractError("slide features: short row in " + path.string());
    SlideFeature f{row[0], row[1], {}, {}};
    for (const auto& s : split(row[2], ';')) f.cluster_sizes.push_back(static_cast<int>(parse_int(s)));
    for (std::size_t j = 3; j < row.size(); ++j) f.values.push_back(parse_double(row[j]));
    out.push_back(std::move(f));
  }
  return out;
}

void write_embeddings(const std::filesystem::path& csv, const EmbeddingTable& table,
                      const std::filesystem::path& binary) {
  const std::size_t n = table.rows.size();
  if (table.patch_ids.size() != n || table.slide_ids.size() != n) throw ShapeError("write_embeddings: column lengths differ");
  const std::size_t d = n ? table.rows.front().size() : 0;
  CsvTable t;
  t.header = {"patch_id", "slide_id", "scale_tag"};
  for (std::size_t j = 0; j < d; ++j) t.header.push_back("f" + std::to_string(j));
  for (std::size_t i = 0; i < n; ++i) {
    if (table.rows[i].size() != d) throw ShapeError("write_embeddings: ragged rows");
    std::vector<std::string> row{table.patch_ids[i], table.slide_ids[i], table.scale_tag};
    for (const float v : table.rows[i]) row.push_back(format_number(v));
    t.rows.push_back(std::move(row));
  }
  write_csv(csv, t);
  if (!binary.empty() && n > 0) {
    TensorArchive archive;
    archive.meta = {{"scale", table.scale_tag}, {"patch_ids", table.patch_ids}, {"slide_ids", table.slide_ids}};
    std::vector<float> flat;
    for (const auto& r : table.rows) flat.insert(flat.end(), r.begin(), r.end());
    archive.entries.push_back({"embeddings", "data", Tensor({n, d}, std::move(flat))});
    save_archive(binary, archive, kEmbeddingMagic);
  }
}

EmbeddingTable read_embeddings(const std::filesystem::path& csv) {
  const auto t = read_csv(csv);
  EmbeddingTable out;
  for (const auto& row : t.rows) {
    if (row.size() < 3) throw ContractError("embeddings: short row in " + csv.string());
    out.patch_ids.push_back(row[0]);
    out.slide_ids.push_back(row[1]);
    out.scale_tag = row[2];
    std::vector<float> v;
    for (std::size_t j = 3; j < row.size(); ++j) v.push_back(static_cast<float>(parse_double(row[j])));
    out.rows.push_back(std::move(v));
  }
  return out;
}

}  // namespace histoage
