// Copyright 2026 The HistoAge Authors.
// SPDX-License-Identifier: Apache-2.0

#include "histoage/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numbers>

#include "histoage/error.hpp"
#include "histoage/io.hpp"
#include "histoage/parallel.hpp"
#include "histoage/rng.hpp"

namespace histoage {

void GeneratorSpec::validate() const {
  for (int i = 0; i < 7; ++i) {
    if (male_counts[i] < 0 || female_counts[i] < 0) throw ConfigError("synth.counts", "stratum counts must be >= 0");
    if (!(bin_lo[i] < bin_hi[i]) || bin_lo[i] < 0) throw ConfigError("synth.bins", "age bins must be increasing");
  }
  if (!(scale_factor > 0)) throw ConfigError("synth.scale_factor", "must be positive");
  if (!(weibull_shape > 0)) throw ConfigError("synth.weibull_shape", "must be positive");
  if (!(weibull_scale > 0)) throw ConfigError("synth.weibull_scale", "must be positive");
  if (!(female_scale_ratio > 0)) throw ConfigError("synth.female_scale_ratio", "must be positive");
  if (!(followup_cap >= 0)) throw ConfigError("synth.followup_cap", "must be >= 0");
  if (biopsy_year_last < biopsy_year_first) throw ConfigError("synth.biopsy_year_last", "before the first year");
  if (slide_side < kNetworkInputSide) throw ConfigError("synth.slide_side", "slides must be at least 224 px");
  if (slide_ppi != 2140 && slide_ppi != 4280) throw ConfigError("synth.slide_ppi", "must be 2140 or 4280");
  if (!(latent_age_sd >= 0)) throw ConfigError("synth.latent_age_sd", "must be >= 0");
  for (const double p : {nevus_base_probability, nevus_probability_at_85})
    if (!(p > 0 && p < 1)) throw ConfigError("synth.nevus_probability", "probabilities must be in (0, 1)");
}

nlohmann::json GeneratorSpec::to_json() const {
  return {{"male_counts", male_counts},
          {"female_counts", female_counts},
          {"scale_factor", scale_factor},
          {"bin_lo", bin_lo},
          {"bin_hi", bin_hi},
          {"disease_a", disease_a},
          {"disease_b", disease_b},
          {"age_centre", age_centre},
          {"beta_age", beta_age},
          {"beta_disease", beta_disease},
          {"weibull_shape", weibull_shape},
          {"weibull_scale", weibull_scale},
          {"female_scale_ratio", female_scale_ratio},
          {"followup_cap", followup_cap},
          {"biopsy_year_first", biopsy_year_first},
          {"biopsy_year_last", biopsy_year_last},
          {"followup_end_year", followup_end_year},
          {"latent_age_sd", latent_age_sd},
          {"slide_side", slide_side},
          {"slide_ppi", slide_ppi},
          {"epidermis_px", epidermis_px},
          {"epidermis_slope", epidermis_slope},
          {"epidermis_noise_px", epidermis_noise_px},
          {"coherence_young", coherence_young},
          {"coherence_slope", coherence_slope},
          {"fibre_density_slope", fibre_density_slope},
          {"nevus_base_probability", nevus_base_probability},
          {"nevus_probability_at_85", nevus_probability_at_85}};
}

double epidermis_thickness(const GeneratorSpec& spec, double age) {
  return std::max(4.0, spec.epidermis_px * (1.0 - spec.epidermis_slope * age));
}

double collagen_coherence(const GeneratorSpec& spec, double age) {
  return std::clamp(spec.coherence_young - spec.coherence_slope * age, 0.0, 1.0);
}

double nevus_probability(const GeneratorSpec& spec, double age) {
  if (age <= 50) return spec.nevus_base_probability;
  const double f = std::min(1.0, (age - 50) / 35.0);
  return spec.nevus_base_probability + f * (spec.nevus_probability_at_85 - spec.nevus_base_probability);
}

namespace {

std::string date_string(double t) {
  static constexpr int kDays[12] = {31, 28, 31, 30, 31, 30, 31, 31, 30, 31, 30, 31};
  const int year = static_cast<int>(std::floor(t));
  int doy = std::min(364, static_cast<int>((t - year) * 365.0));
  int month = 0;
  while (doy >= kDays[month]) doy -= kDays[month++];
  char buf[40];
  std::snprintf(buf, sizeof buf, "%04d-%02d-%02d", year, month + 1, doy + 1);
  return buf;
}

std::string numbered(char prefix, std::size_t n) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%c%04zu", prefix, n);
  return buf;
}

}  // namespace

SyntheticCohort gen_subjects(const GeneratorSpec& spec, std::uint64_t seed) {
  spec.validate();
  Rng rng(derive_seed(seed, "subjects"));
  SyntheticCohort out;
  std::size_t serial = 0;
  for (const int sex : {0, 1}) {
    const auto& counts = sex == 0 ? spec.male_counts : spec.female_counts;
    for (int b = 0; b < 7; ++b) {
      const auto n = static_cast<int>(std::llround(counts[b] * spec.scale_factor));
      for (int k = 0; k < n; ++k) {
        ++serial;
        Subject s;
        s.pid = numbered('P', serial);
        s.sex = sex;
        s.age = rng.uniform(spec.bin_lo[b], spec.bin_hi[b]);
        const double latent = std::max(0.0, s.age + rng.normal(0.0, spec.latent_age_sd));
        double lp = spec.beta_age * (s.age - spec.age_centre);
        for (std::size_t d = 0; d < kDiseaseCount; ++d) {
          const double logit = spec.disease_a[d] + spec.disease_b[d] * (s.age - spec.age_centre);
          s.disease[d] = rng.bernoulli(1.0 / (1.0 + std::exp(-logit))) ? 1 : 0;
          lp += spec.beta_disease[d] * s.disease[d];
        }
        const double scale = spec.weibull_scale * (sex == 0 ? 1.0 : spec.female_scale_ratio);
        const double u = 1.0 - rng.uniform();  // (0, 1]
        const double death = scale * std::pow(-std::log(u) / std::exp(lp), 1.0 / spec.weibull_shape);
        const double biopsy = rng.uniform(spec.biopsy_year_first, spec.biopsy_year_last + 1.0);
        s.biopsy_date = date_string(biopsy);
        const double available = std::min(spec.followup_cap, spec.followup_end_year - biopsy);
        s.event = death <= available ? 1 : 0;
        s.followup_years = std::min(death, available);

        TruthRecord t;
        t.pid = s.pid;
        t.slide_id = numbered('W', serial);
        t.latent_age = latent;
        t.epidermis_px = epidermis_thickness(spec, latent);
        t.coherence = collagen_coherence(spec, latent);
        t.nevus = rng.bernoulli(nevus_probability(spec, latent));
        out.subjects.push_back(std::move(s));
        out.truth.push_back(std::move(t));
      }
    }
  }
  return out;
}

namespace {

struct Canvas {
  Image8& img;
  Image8& mask;

  void blend(int x, int y, const double* rgb, double alpha) {
    if (x < 0 || y < 0 || x >= img.width || y >= img.height) return;
    std::uint8_t* p = img.at(x, y);
    for (int c = 0; c < 3; ++c) p[c] = static_cast<std::uint8_t>(std::lround(p[c] + alpha * (rgb[c] - p[c])));
  }
  void disc(double cx, double cy, double r, const double* rgb, double alpha, int only_label = -1) {
    const int x0 = static_cast<int>(std::floor(cx - r)), x1 = static_cast<int>(std::ceil(cx + r));
    const int y0 = static_cast<int>(std::floor(cy - r)), y1 = static_cast<int>(std::ceil(cy + r));
    for (int y = y0; y <= y1; ++y)
      for (int x = x0; x <= x1; ++x) {
        if (x < 0 || y < 0 || x >= img.width || y >= img.height) continue;
        if (only_label >= 0 && *mask.at(x, y) != only_label) continue;
        const double d = std::hypot(x - cx, y - cy);
        if (d <= r) blend(x, y, rgb, alpha);
      }
  }
};

}  // namespace

SyntheticSlide gen_slide(const GeneratorSpec& spec, const TruthRecord& truth, std::uint64_t seed) {
  spec.validate();
  Rng rng(derive_seed(seed, "slide:" + truth.pid));
  const int side = spec.slide_side;
  const double s = side;
  SyntheticSlide out;
  out.raster.slide_id = truth.slide_id;
  out.raster.subject_pid = truth.pid;
  out.raster.resolution_ppi = spec.slide_ppi;
  out.raster.pixels = Image8(side, side, 3);
  out.mask = Image8(side, side, 1, static_cast<std::uint8_t>(Region::kBackground));
  auto& img = out.raster.pixels;
  Canvas canvas{img, out.mask};
  constexpr double pi = std::numbers::pi;

  // Tissue outline: wavy top and bottom edges, soft left and right margins.
  const double ph1 = rng.uniform(0, 2 * pi), ph2 = rng.uniform(0, 2 * pi), ph3 = rng.uniform(0, 2 * pi);
  const double top0 = 0.15 * s, bot0 = 0.88 * s, amp = 0.025 * s;
  const double thick = truth.epidermis_px;
  std::vector<double> top(side), bottom(side), band(side);
  for (int x = 0; x < side; ++x) {
    const double u = x / s;
    top[x] = top0 + amp * std::sin(2 * pi * 1.3 * u + ph1);
    bottom[x] = bot0 + amp * std::sin(2 * pi * 0.9 * u + ph2);
    band[x] = std::max(2.0, thick + spec.epidermis_noise_px * std::sin(2 * pi * 7.0 * u + ph3));
  }
  const double left = 0.05 * s, right = 0.95 * s;

  const double bg[3] = {242, 242, 244};
  const double dermis[3] = {224, 160, 194};
  const double epi[3] = {168, 84, 152};
  for (int y = 0; y < side; ++y) {
    for (int x = 0; x < side; ++x) {
      std::uint8_t* p = img.at(x, y);
      std::uint8_t* m = out.mask.at(x, y);
      const double xm = std::min(x - left, right - x);
      const bool inside = xm >= 0 && y >= top[x] && y < bottom[x];
      const double* base = bg;
      if (inside) {
        if (y < top[x] + band[x]) {
          base = epi;
          *m = static_cast<std::uint8_t>(Region::kEpidermis);
        } else {
          base = dermis;
          *m = static_cast<std::uint8_t>(Region::kCollagen);
        }
      }
      for (int c = 0; c < 3; ++c) p[c] = static_cast<std::uint8_t>(base[c]);
    }
  }

  // Collagen fibres: short strokes whose orientation spread grows as coherence falls.
  const double theta0 = rng.uniform(0, pi);
  const double spread = (1.0 - truth.coherence) * pi / 2;
  const double fibre[3] = {186, 92, 148};
  double dermis_area = 0;
  for (int x = 0; x < side; ++x) dermis_area += std::max(0.0, bottom[x] - top[x] - band[x]);
  dermis_area *= (right - left) / s;
  const double density = std::max(0.1, 1.0 - spec.fibre_density_slope * truth.latent_age);
  const auto strokes = static_cast<long>(dermis_area / 90.0 * density);
  for (long k = 0; k < strokes; ++k) {
    const double cx = rng.uniform(left, right), cy = rng.uniform(top0 - amp, bot0 + amp);
    const double theta = theta0 + rng.uniform(-spread, spread);
    const double len = rng.uniform(24, 48);
    const double alpha = rng.uniform(0.55, 0.9);
    const double dx = std::cos(theta), dy = std::sin(theta);
    for (double t = -len / 2; t <= len / 2; t += 1.0)
      canvas.disc(cx + t * dx, cy + t * dy, 1.2, fibre, alpha, static_cast<int>(Region::kCollagen));
  }

  // Nevus: a dark nest cluster in the upper dermis.
  if (truth.nevus) {
    const double ncx = rng.uniform(0.25 * s, 0.75 * s);
    const int xi = std::clamp(static_cast<int>(ncx), 0, side - 1);
    const double ncy = top[xi] + band[xi] + 0.12 * s;
    const double rx = 0.09 * s, ry = 0.06 * s;
    const double nest[3] = {118, 72, 58};
    for (int y = static_cast<int>(ncy - ry); y <= static_cast<int>(ncy + ry); ++y)
      for (int x = static_cast<int>(ncx - rx); x <= static_cast<int>(ncx + rx); ++x) {
        if (x < 0 || y < 0 || x >= side || y >= side) continue;
        const double e = std::pow((x - ncx) / rx, 2) + std::pow((y - ncy) / ry, 2);
        if (e > 1 || *out.mask.at(x, y) != static_cast<std::uint8_t>(Region::kCollagen)) continue;
        *out.mask.at(x, y) = static_cast<std::uint8_t>(Region::kNevus);
        canvas.blend(x, y, nest, 0.7);
      }
    const auto nests = static_cast<int>(rx * ry / 40.0);
    for (int k = 0; k < nests; ++k) {
      const double a = rng.uniform(0, 2 * pi), r = std::sqrt(rng.uniform());
      canvas.disc(ncx + r * rx * std::cos(a), ncy + r * ry * std::sin(a), rng.uniform(2, 4), nest, 0.9,
                  static_cast<int>(Region::kNevus));
    }
  }

  // Nuclei: dense in the epidermis, sparse in the dermis.
  const double nucleus[3] = {96, 48, 128};
  const auto nuclei = static_cast<long>(s * s / 1200.0);
  for (long k = 0; k < nuclei; ++k) {
    const double x = rng.uniform(0, s), y = rng.uniform(0, s);
    const auto label = *out.mask.at(static_cast<int>(x), static_cast<int>(y));
    if (label == static_cast<std::uint8_t>(Region::kBackground)) continue;
    canvas.disc(x, y, rng.uniform(1.5, 2.8), nucleus, 0.85, label);
  }
  const auto epi_nuclei = static_cast<long>((right - left) * thick / 60.0);
  for (long k = 0; k < epi_nuclei; ++k) {
    const double x = rng.uniform(left, right);
    const int xi = std::clamp(static_cast<int>(x), 0, side - 1);
    const double y = top[xi] + rng.uniform() * band[xi];
    canvas.disc(x, y, rng.uniform(1.5, 2.5), nucleus, 0.85, static_cast<int>(Region::kEpidermis));
  }

  // Sensor noise.
  for (auto& v : img.pixels) v = static_cast<std::uint8_t>(std::clamp(std::lround(v + rng.normal(0.0, 2.0)), 0L, 255L));
  return out;
}

std::string to_string(Region r) {
  switch (r) {
    case Region::kBackground: return "background";
    case Region::kEpidermis: return "epidermis";
    case Region::kCollagen: return "collagen";
    case Region::kNevus: return "nevus";
  }
  return "?";
}

Region dominant_region(const Image8& mask, int x, int y, int w, int h) {
  std::array<std::size_t, 4> count{};
  for (int yy = std::max(0, y); yy < std::min(mask.height, y + h); ++yy)
    for (int xx = std::max(0, x); xx < std::min(mask.width, x + w); ++xx) ++count[std::min<int>(*mask.at(xx, yy), 3)];
  return static_cast<Region>(std::max_element(count.begin(), count.end()) - count.begin());
}

std::vector<std::filesystem::path> write_synthetic_dataset(const SyntheticPaths& paths, const GeneratorSpec& spec,
                                                           std::uint64_t seed) {
  spec.validate();
  const auto cohort = gen_subjects(spec, seed);
  std::filesystem::create_directories(paths.slides_dir);
  parallel_for(cohort.truth.size(), [&](std::size_t i) {
    const auto& t = cohort.truth[i];
    const auto slide = gen_slide(spec, t, seed);
    write_png(paths.slides_dir / (t.slide_id + ".png"), slide.raster.pixels);
    write_png(paths.slides_dir / (t.slide_id + ".mask.png"), slide.mask);
    write_sidecar(paths.slides_dir / (t.slide_id + ".json"), {t.slide_id, spec.slide_ppi, t.pid});
  });
  write_cohort(paths.cohort_file, cohort.subjects);
  nlohmann::json truth = {{"seed", seed}, {"spec", spec.to_json()}, {"subjects", nlohmann::json::array()}};
  for (const auto& t : cohort.truth)
    truth["subjects"].push_back({{"pid", t.pid},
                                 {"slide_id", t.slide_id},
                                 {"latent_age", t.latent_age},
                                 {"epidermis_px", t.epidermis_px},
                                 {"coherence", t.coherence},
                                 {"nevus", t.nevus}});
  const auto truth_file = paths.truth_dir / "truth.json";
  write_text(truth_file, truth.dump(1) + "\n");

  std::vector<std::filesystem::path> written;
  for (const auto& t : cohort.truth)
    for (const char* ext : {".png", ".mask.png", ".json"}) written.push_back(paths.slides_dir / (t.slide_id + ext));
  written.push_back(paths.cohort_file);
  written.push_back(truth_file);
  return written;
}

void write_synthetic_dataset(const std::filesystem::path& out_dir, const GeneratorSpec& spec, std::uint64_t seed) {
  write_synthetic_dataset(SyntheticPaths{out_dir / "slides", out_dir / "cohort.csv", out_dir / "truth"}, spec, seed);
}

std::vector<TruthRecord> read_truth(const std::filesystem::path& truth_file) {
  const auto j = nlohmann::json::parse(read_text(truth_file));
  std::vector<TruthRecord> out;
  for (const auto& s : j.at("subjects"))
    out.push_back({s.at("pid").get<std::string>(), s.at("slide_id").get<std::string>(), s.at("latent_age").get<double>(),
                   s.at("epidermis_px").get<double>(), s.at("coherence").get<double>(), s.at("nevus").get<bool>()});
  return out;
}

}  // namespace histoage
