// Copyright 2026 The HistoAge Authors.
// SPDX-License-Identifier: Apache-2.0

#include "histoage/report.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <sstream>

#include "histoage/epi.hpp"
#include "histoage/error.hpp"

namespace histoage {

std::string format_estimate(double value, double lo, double hi, int decimals) {
  if (!std::isfinite(value)) return "n/a";
  std::string out = format_fixed(value, decimals);
  if (std::isfinite(lo) && std::isfinite(hi))
    out += " (" + format_fixed(lo, decimals) + " - " + format_fixed(hi, decimals) + ")";
  return out;
}

CsvTable age_table(const std::map<std::string, std::vector<MaeRow>>& by_scale) {
  CsvTable t;
  t.header = {"sex", "age_group", "participants"};
  for (const auto& [scale, rows] : by_scale) t.header.push_back("MAE " + scale);
  const auto bins = table_age_bins();
  for (const int sex : {0, 1}) {
    for (const auto& bin : bins) {
      std::vector<std::string> row{sex == 0 ? "Males" : "Females", bin.label, ""};
      std::size_t count = 0;
      bool seen = false;
      for (const auto& [scale, rows] : by_scale) {
        const auto it = std::find_if(rows.begin(), rows.end(),
                                     [&](const MaeRow& r) { return r.sex == sex && r.bin == bin.label; });
        if (it == rows.end()) throw ContractError("age table: no row for " + bin.label + " in " + scale);
        // Scales may cover different slides (S3 drops unpaired ones); report the largest.
        count = seen ? std::max(count, it->count) : it->count;
        seen = true;
        row.push_back(format_estimate(it->mae, it->lo, it->hi));
      }
      row[2] = std::to_string(count);
      t.rows.push_back(std::move(row));
    }
  }
  return t;
}

CsvTable disease_table(const CsvTable& accuracy, const std::string& metric) {
  const auto c_sex = accuracy.column("sex");
  const auto c_disease = accuracy.column("disease");
  const auto c_source = accuracy.column("source");
  const auto c_value = accuracy.column(metric);
  CsvTable t;
  t.header = {"Disease"};
  const std::array<std::string, 3> sources{"actual", "predicted", "combined"};
  const std::array<std::string, 3> labels{"Actual Age", "Predicted Age", "Combined"};
  for (const auto* sex : {"Males", "Females"})
    for (const auto& l : labels) t.header.push_back(std::string(sex) + " " + l);
  for (const auto d : kDiseases) {
    std::vector<std::string> row{display_name(d)};
    for (const auto* sex : {"M", "F"}) {
      for (const auto& src : sources) {
        std::string cell = "n/a";
        for (const auto& r : accuracy.rows)
          if (r[c_sex] == sex && r[c_disease] == column_name(d) && r[c_source] == src && !r[c_value].empty())
            cell = format_fixed(parse_double(r[c_value]), 3);
        row.push_back(cell);
      }
    }
    t.rows.push_back(std::move(row));
  }
  return t;
}

CsvTable hazard_table(const CsvTable& hr) {
  const auto c_cov = hr.column("covariate");
  const auto c_arm = hr.column("arm");
  const auto c_hr = hr.column("hr");
  const auto c_lo = hr.column("ci_lo");
  const auto c_hi = hr.column("ci_hi");
  CsvTable t;
  t.header = {"Covariate", "HR actual (CI)", "HR predicted (CI)", "CIs overlap"};
  std::vector<std::string> order;
  for (const auto& r : hr.rows)
    if (std::find(order.begin(), order.end(), r[c_cov]) == order.end()) order.push_back(r[c_cov]);
  for (const auto& cov : order) {
    std::array<std::string, 2> cells{"n/a", "n/a"};
    std::array<std::pair<double, double>, 2> ci{};
    std::array<bool, 2> have{};
    for (const auto& r : hr.rows) {
      if (r[c_cov] != cov) continue;
      const int arm = r[c_arm] == "actual" ? 0 : r[c_arm] == "predicted" ? 1 : -1;
      if (arm < 0) continue;
      const double lo = parse_double(r[c_lo]);
      const double hi = parse_double(r[c_hi]);
      cells[arm] = format_estimate(parse_double(r[c_hr]), lo, hi, 3);
      ci[arm] = {lo, hi};
      have[arm] = true;
    }
    std::string overlap = "n/a";
    if (have[0] && have[1]) overlap = ci[0].first <= ci[1].second && ci[1].first <= ci[0].second ? "yes" : "no";
    t.rows.push_back({cov, cells[0], cells[1], overlap});
  }
  return t;
}

std::string markdown_table(const CsvTable& table, const std::string& title) {
  std::string out;
  if (!title.empty()) out += "### " + title + "\n\n";
  auto line = [&](const std::vector<std::string>& cells) {
    out += "|";
    for (const auto& c : cells) out += " " + c + " |";
    out += "\n";
  };
  line(table.header);
  out += "|";
  for (std::size_t i = 0; i < table.header.size(); ++i) out += i < 2 ? " --- |" : " ---: |";
  out += "\n";
  for (const auto& r : table.rows) line(r);
  return out;
}

std::string survival_svg(const CsvTable& curves) {
  const auto c_stratum = curves.column("stratum");
  const auto c_t = curves.column("t");
  const auto c_s = curves.column("survival");
  std::vector<std::string> strata;
  std::map<std::string, std::vector<std::pair<double, double>>> series;
  double t_max = 0;
  for (const auto& r : curves.rows) {
    if (!series.count(r[c_stratum])) strata.push_back(r[c_stratum]);
    const double t = parse_double(r[c_t]);
    series[r[c_stratum]].emplace_back(t, parse_double(r[c_s]));
    t_max = std::max(t_max, t);
  }
  if (t_max <= 0) t_max = 1;
  const double w = 640, h = 400, left = 60, right = 180, top = 20, bottom = 50;
  const double pw = w - left - right, ph = h - top - bottom;
  auto px = [&](double t) { return format_fixed(left + pw * t / t_max, 2); };
  auto py = [&](double s) { return format_fixed(top + ph * (1.0 - s), 2); };
  static const std::array<const char*, 8> palette{"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                                  "#ff7f0e", "#8c564b", "#e377c2", "#7f7f7f"};
  std::ostringstream o;
  o << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << w << "\" height=\"" << h
    << "\" font-family=\"sans-serif\" font-size=\"12\">\n";
  o << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  o << "<line x1=\"" << left << "\" y1=\"" << top + ph << "\" x2=\"" << left + pw << "\" y2=\"" << top + ph
    << "\" stroke=\"black\"/>\n";
  o << "<line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\"" << top + ph
    << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double s = i / 4.0;
    o << "<text x=\"" << left - 8 << "\" y=\"" << py(s) << "\" text-anchor=\"end\">" << format_fixed(s, 2)
      << "</text>\n";
    const double t = t_max * i / 4.0;
    o << "<text x=\"" << px(t) << "\" y=\"" << top + ph + 18 << "\" text-anchor=\"middle\">" << format_fixed(t, 1)
      << "</text>\n";
  }
  o << "<text x=\"" << left + pw / 2 << "\" y=\"" << h - 10 << "\" text-anchor=\"middle\">Years since biopsy</text>\n";
  o << "<text x=\"15\" y=\"" << top + ph / 2 << "\" transform=\"rotate(-90 15 " << top + ph / 2
    << ")\" text-anchor=\"middle\">Survival probability</text>\n";
  for (std::size_t k = 0; k < strata.size(); ++k) {
    const char* colour = palette[k % palette.size()];
    const bool dashed = strata[k].rfind("predicted", 0) == 0;
    o << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"1.5\""
      << (dashed ? " stroke-dasharray=\"6 3\"" : "") << " points=\"";
    // Step function: hold each value until the next grid time.
    const auto& pts = series[strata[k]];
    for (std::size_t i = 0; i < pts.size(); ++i) {
      if (i > 0) o << " " << px(pts[i].first) << "," << py(pts[i - 1].second);
      o << (i > 0 ? " " : "") << px(pts[i].first) << "," << py(pts[i].second);
    }
    o << "\"/>\n";
    const double ly = top + 16 * (k + 1);
    o << "<line x1=\"" << left + pw + 12 << "\" y1=\"" << ly - 4 << "\" x2=\"" << left + pw + 36 << "\" y2=\""
      << ly - 4 << "\" stroke=\"" << colour << "\" stroke-width=\"1.5\"" << (dashed ? " stroke-dasharray=\"6 3\"" : "")
      << "/>\n";
    o << "<text x=\"" << left + pw + 42 << "\" y=\"" << ly << "\">" << strata[k] << "</text>\n";
  }
  o << "</svg>\n";
  return o.str();
}

// 5x7 font --------------------------------------------------------------------

namespace {

struct Glyph {
  char c;
  std::array<std::uint8_t, 7> rows;  // bit 4 is the leftmost dot
};

constexpr Glyph kFont[] = {
    {'0', {0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E}}, {'1', {0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E}},
    {'2', {0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F}}, {'3', {0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E}},
    {'4', {0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02}}, {'5', {0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E}},
    {'6', {0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E}}, {'7', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08}},
    {'8', {0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E}}, {'9', {0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C}},
    {'A', {0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}}, {'B', {0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E}},
    {'C', {0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E}}, {'D', {0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C}},
    {'E', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F}}, {'F', {0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10}},
    {'G', {0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F}}, {'H', {0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11}},
    {'I', {0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E}}, {'J', {0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C}},
    {'K', {0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11}}, {'L', {0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F}},
    {'M', {0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11}}, {'N', {0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11}},
    {'O', {0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}}, {'P', {0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10}},
    {'Q', {0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D}}, {'R', {0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11}},
    {'S', {0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E}}, {'T', {0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04}},
    {'U', {0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E}}, {'V', {0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04}},
    {'W', {0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A}}, {'X', {0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11}},
    {'Y', {0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04}}, {'Z', {0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F}},
    {'.', {0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C}}, {':', {0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00}},
    {'-', {0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00}}, {'+', {0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00}},
    {'=', {0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00}}, {'/', {0x00, 0x01, 0x02, 0x04, 0x08, 0x10, 0x00}},
    {'(', {0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02}}, {')', {0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08}},
    {'#', {0x0A, 0x0A, 0x1F, 0x0A, 0x1F, 0x0A, 0x0A}}, {'_', {0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F}},
    {'>', {0x08, 0x04, 0x02, 0x01, 0x02, 0x04, 0x08}}, {'<', {0x02, 0x04, 0x08, 0x10, 0x08, 0x04, 0x02}},
    {',', {0x00, 0x00, 0x00, 0x00, 0x0C, 0x04, 0x08}}, {'%', {0x18, 0x19, 0x02, 0x04, 0x08, 0x13, 0x03}},
};

const Glyph* glyph(char c) {
  if (c >= 'a' && c <= 'z') c = static_cast<char>(c - 'a' + 'A');
  for (const auto& g : kFont)
    if (g.c == c) return &g;
  return nullptr;
}

}  // namespace

int text_width(const std::string& text, int scale) {
  return text.empty() ? 0 : static_cast<int>(text.size()) * 6 * scale - scale;
}

void draw_text(Image8& image, int x, int y, const std::string& text, const std::array<std::uint8_t, 3>& rgb,
               int scale) {
  for (std::size_t i = 0; i < text.size(); ++i) {
    const Glyph* g = glyph(text[i]);
    if (g == nullptr) continue;
    const int gx = x + static_cast<int>(i) * 6 * scale;
    for (int r = 0; r < 7; ++r)
      for (int c = 0; c < 5; ++c) {
        if (!(g->rows[r] & (0x10 >> c))) continue;
        for (int dy = 0; dy < scale; ++dy)
          for (int dx = 0; dx < scale; ++dx) {
            const int px = gx + c * scale + dx, py = y + r * scale + dy;
            if (px < 0 || py < 0 || px >= image.width || py >= image.height) continue;
            std::uint8_t* p = image.at(px, py);
            for (int ch = 0; ch < std::min(3, image.channels); ++ch) p[ch] = rgb[ch];
          }
      }
  }
}

std::pair<int, int> montage_grid(std::size_t n, int rows, int cols) {
  if (n == 0) throw ContractError("montage: no cells");
  if (rows < 1 || cols < 1) throw ContractError("montage: grid must be at least 1x1");
  const int c = static_cast<int>(std::min<std::size_t>(cols, n));
  const int r = static_cast<int>(std::min<std::size_t>(rows, (n + c - 1) / c));
  return {r, c};
}

Image8 render_montage(const std::vector<MontageCell>& cells, int rows, int cols) {
  const auto [r, c] = montage_grid(cells.size(), rows, cols);
  int cell_w = 0, cell_h = 0;
  std::size_t max_lines = 0;
  for (const auto& cell : cells) {
    cell_w = std::max(cell_w, cell.image.width);
    cell_h = std::max(cell_h, cell.image.height);
    max_lines = std::max(max_lines, cell.lines.size());
  }
  constexpr int kScale = 2, kLine = 18, kPad = 8;
  const int caption = static_cast<int>(max_lines) * kLine + kPad;
  const int out_w = c * (cell_w + kPad) + kPad;
  const int out_h = r * (cell_h + caption + kPad) + kPad;
  Image8 out(out_w, out_h, 3, 255);
  const std::size_t shown = std::min<std::size_t>(cells.size(), static_cast<std::size_t>(r) * c);
  for (std::size_t i = 0; i < shown; ++i) {
    const int gx = kPad + static_cast<int>(i % c) * (cell_w + kPad);
    const int gy = kPad + static_cast<int>(i / c) * (cell_h + caption + kPad);
    const auto& img = cells[i].image;
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < img.width; ++x) {
        const std::uint8_t* src = img.at(x, y);
        std::uint8_t* dst = out.at(gx + x, gy + y);
        for (int ch = 0; ch < 3; ++ch) dst[ch] = src[img.channels == 3 ? ch : 0];
      }
    for (std::size_t l = 0; l < cells[i].lines.size(); ++l)
      draw_text(out, gx, gy + cell_h + 4 + static_cast<int>(l) * kLine, cells[i].lines[l], {20, 20, 20}, kScale);
  }
  return out;
}

}  // namespace histoage
