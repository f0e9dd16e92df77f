// Copyright 2026 The HistoAge Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <span>
#include <vector>

namespace histoage {

double mean(std::span<const double> x);
/// Sample variance (n - 1 denominator); 0 for n < 2.
double variance(std::span<const double> x);

/// Linear-interpolation quantile (type 7). q in [0, 1]; x need not be sorted.
double quantile(std::vector<double> x, double q);

/// Average ranks (1-based) with ties sharing the mean rank.
std::vector<double> ranks(std::span<const double> x);
double pearson(std::span<const double> a, std::span<const double> b);
double spearman(std::span<const double> a, std::span<const double> b);

/// Upper-tail probability of a chi-square variate.
double chi_square_sf(double x, int dof);
/// Standard normal CDF.
double normal_cdf(double z);

}  // namespace histoage
