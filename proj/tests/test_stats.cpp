// Copyright 2026 The HistoAge Authors.
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cmath>
#include <vector>

#include "histoage/rng.hpp"
#include "histoage/stats.hpp"

using namespace histoage;

TEST_SUITE("stats") {

TEST_CASE("moments and quantiles") {
  const std::vector<double> x{1, 2, 3, 4};
  CHECK(mean(x) == 2.5);
  CHECK(variance(x) == doctest::Approx(5.0 / 3.0));
  CHECK(variance(std::vector<double>{7}) == 0);
  CHECK(quantile({4, 1, 3, 2}, 0.5) == doctest::Approx(2.5));
  CHECK(quantile({1, 2, 3, 4, 5}, 0.25) == doctest::Approx(2.0));
  CHECK(quantile({10, 20}, 0.975) == doctest::Approx(19.75));
  CHECK(quantile({5}, 0.3) == 5);
}

TEST_CASE("ranks and correlations") {
  CHECK(ranks(std::vector<double>{10, 30, 20, 20}) == std::vector<double>{1, 4, 2.5, 2.5});
  const std::vector<double> a{1, 2, 3, 4, 5}, b{2, 4, 6, 8, 10}, c{1, 8, 27, 64, 125}, d{5, 4, 3, 2, 1};
  CHECK(pearson(a, b) == doctest::Approx(1.0));
  CHECK(spearman(a, c) == doctest::Approx(1.0));
  CHECK(pearson(a, c) < 1.0);
  CHECK(spearman(a, d) == doctest::Approx(-1.0));
  Rng rng(1);
  std::vector<double> u(500), v(500);
  for (auto& x : u) x = rng.normal();
  for (auto& x : v) x = rng.normal();
  CHECK(std::abs(spearman(u, v)) < 0.15);
}

TEST_CASE("distribution tails") {
  CHECK(normal_cdf(0) == doctest::Approx(0.5));
  CHECK(normal_cdf(1.959963985) == doctest::Approx(0.975).epsilon(1e-6));
  CHECK(chi_square_sf(16.812, 6) == doctest::Approx(0.01).epsilon(1e-3));
  CHECK(chi_square_sf(3.841, 1) == doctest::Approx(0.05).epsilon(1e-3));
  CHECK(chi_square_sf(2.0, 2) == doctest::Approx(std::exp(-1.0)));
  CHECK(chi_square_sf(0, 3) == doctest::Approx(1.0));
}

}  // TEST_SUITE
