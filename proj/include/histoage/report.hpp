// Copyright 2026 The HistoAge Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "histoage/age.hpp"
#include "histoage/image.hpp"
#include "histoage/io.hpp"

namespace histoage {

/// "2.20 (1.70 - 2.90)", or "n/a" for an empty stratum.
std::string format_estimate(double value, double lo, double hi, int decimals = 2);

/// Rows: Males then Females, each with the eight age groups of
/// table_age_bins(). Columns: sex, age_group, participants, then one
/// "MAE <scale>" column per entry of `by_scale` (in map order).
CsvTable age_table(const std::map<std::string, std::vector<MaeRow>>& by_scale);

/// Input: accuracy CSV (`sex,disease,source,cv_accuracy,in_sample_accuracy,skipped`).
/// Output: one row per disease, columns Disease then actual/predicted/combined
/// accuracy for males and then females. `metric` picks the accuracy column.
CsvTable disease_table(const CsvTable& accuracy, const std::string& metric = "cv_accuracy");

/// Hazard ratio CSV (`covariate,arm,hr,ci_lo,ci_hi`) pivoted to one row per
/// covariate with both arms side by side.
CsvTable hazard_table(const CsvTable& hazard_ratios);

/// GitHub-style pipe table.
std::string markdown_table(const CsvTable& table, const std::string& title = {});

/// Line plot of `stratum,t,survival` rows, one polyline per stratum.
std::string survival_svg(const CsvTable& curves);

/// 5x7 bitmap text, `scale` pixels per dot. Lowercase prints as uppercase;
/// unknown characters print as blanks. Clipped at the image edge.
void draw_text(Image8& image, int x, int y, const std::string& text, const std::array<std::uint8_t, 3>& rgb,
               int scale = 1);
int text_width(const std::string& text, int scale = 1);

struct MontageCell {
  Image8 image;
  std::vector<std::string> lines;  // caption under the image
};

/// Grid in rank order, row-major. With fewer cells than rows * cols the grid
/// shrinks to ceil(n / cols') x cols' where cols' = min(cols, n).
Image8 render_montage(const std::vector<MontageCell>& cells, int rows, int cols);
/// Grid actually used by render_montage for n cells.
std::pair<int, int> montage_grid(std::size_t n, int rows, int cols);

}  // namespace histoage
