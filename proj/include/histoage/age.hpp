// Copyright 2026 The HistoAge Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "histoage/matrix.hpp"

namespace histoage {

struct GbtConfig {
  int depth = 4;
  int trees = 200;
  double eta = 0.1;
  double lambda = 1.0;
  double colsample = 1.0;  // fraction of features considered per tree

  void validate() const;
};

struct RegressionTree {
  struct Node {
    int feature = -1;  // -1 marks a leaf
    double threshold = 0;
    int left = -1;
    int right = -1;
    double value = 0;  // leaf weight before shrinkage
  };
  std::vector<Node> nodes;

  double predict(std::span<const double> x) const;
  int depth() const;
};

/// Squared-error gradient boosting: prediction = base + eta * sum of tree
/// leaf weights, leaf weight = sum(residual) / (count + lambda). Splits are
/// exact greedy on the ridge gain.
struct GbtModel {
  double base = 0;
  double eta = 0.1;
  std::vector<RegressionTree> trees;
  /// Training MSE after the base and after each tree (trees + 1 entries).
  std::vector<double> train_mse;

  double predict(std::span<const double> x) const;
  std::vector<double> predict(const Matrix& x) const;
};

GbtModel fit_gbt(const Matrix& x, std::span<const double> y, const GbtConfig& config = {}, std::uint64_t seed = 0);

struct BootstrapConfig {
  int members = 1000;
  GbtConfig gbt{};
  std::uint64_t seed = 0;
};

struct AgePrediction {
  std::string pid;
  int sex = 0;  // 0 male, 1 female
  double actual = 0;
  double point = 0;
  double lo = 0;
  double hi = 0;
  bool oob = true;  // false: never out of bag, all-member fallback
  int oob_members = 0;
};

struct BootstrapResult {
  std::vector<AgePrediction> predictions;
  Matrix member_predictions;                 // members x subjects
  std::vector<std::vector<int>> multiplicity;  // members x subjects, draws in each resample
};

/// Bagged GBT with sex appended as a feature column. Each subject's point is
/// the mean over members whose resample left it out; the interval is the
/// 2.5-97.5 percentile over the same members.
BootstrapResult bootstrap_fit_predict(const Matrix& features, std::span<const double> ages, std::span<const int> sexes,
                                      std::span<const std::string> pids, const BootstrapConfig& config);

struct AgeBin {
  std::string label;
  double lo;
  double hi;  // exclusive
};

/// 0-20, 21-30, ..., 61-70, >=71, All ages.
std::vector<AgeBin> table_age_bins();

struct MaeRow {
  int sex = 0;
  std::string bin;
  std::size_t count = 0;
  double mae = 0;
  double lo = 0;
  double hi = 0;
};

/// Per sex and age bin. The interval is the 2.5-97.5 percentile over
/// bootstrap members of the MAE reweighted by each member's resample
/// multiplicities. Empty strata have count 0 and NaN statistics.
std::vector<MaeRow> mae_table(const BootstrapResult& result);
std::vector<MaeRow> mae_table(std::span<const AgePrediction> predictions);

void write_predictions(const std::filesystem::path& path, std::span<const AgePrediction> predictions);
std::vector<AgePrediction> read_predictions(const std::filesystem::path& path);

struct PatchScore {
  std::string patch_id;
  std::string slide_id;
  double actual = 0;
  double predicted = 0;
  double error = 0;
};

struct AttentionConfig {
  GbtConfig gbt{};
  int folds = 5;
  std::uint64_t seed = 0;
};

/// Per-patch GBT predictions, out of fold with slides kept whole within a
/// fold, ranked ascending by |predicted - actual| (ties by patch id).
std::vector<PatchScore> rank_attention_patches(const Matrix& patch_features, std::span<const std::string> patch_ids,
                                               std::span<const std::string> slide_ids,
                                               std::span<const double> actual_ages, const AttentionConfig& config);

/// First m entries of each slide in ranked order, concatenated in rank order.
std::vector<PatchScore> top_per_slide(std::span<const PatchScore> ranked, std::size_t m);

}  // namespace histoage
