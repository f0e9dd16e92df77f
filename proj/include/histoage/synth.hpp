// Copyright 2026 The HistoAge Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "histoage/epi.hpp"
#include "histoage/tiler.hpp"

namespace histoage {

/// Parameters of the synthetic cohort and slide generator.
struct GeneratorSpec {
  // Subjects per age bin, males then females.
  std::array<int, 7> male_counts{100, 100, 100, 100, 199, 217, 103};
  std::array<int, 7> female_counts{99, 99, 100, 99, 246, 153, 72};
  double scale_factor = 1.0;
  std::array<double, 7> bin_lo{7, 21, 31, 41, 51, 61, 71};
  std::array<double, 7> bin_hi{21, 31, 41, 51, 61, 71, 95};

  // Prevalent disease: logit = a + b * (age - age_centre), disease order as kDiseases.
  std::array<double, kDiseaseCount> disease_a{-0.5, -1.0, 0.0, -0.5, -1.0, -0.5, -1.0};
  std::array<double, kDiseaseCount> disease_b{0.03, 0.02, 0.03, 0.02, 0.03, 0.02, 0.03};
  double age_centre = 50;

  // Survival: Weibull-Cox, log hazard ratio beta_age per year plus beta per disease.
  double beta_age = 0.08;
  std::array<double, kDiseaseCount> beta_disease{0.6, 0.9, 0.2, 0.2, 0.2, 0.2, 0.2};
  double weibull_shape = 1.5;
  double weibull_scale = 5.0;  // years, males
  double female_scale_ratio = 1.3;
  double followup_cap = 20;
  int biopsy_year_first = 2000;
  int biopsy_year_last = 2015;
  int followup_end_year = 2021;  // follow-up ends at the start of this year

  // Slides. Textures are driven by the latent (biological) age.
  double latent_age_sd = 3.0;
  int slide_side = 4096;
  int slide_ppi = 2140;
  double epidermis_px = 60;
  double epidermis_slope = 0.006;  // thickness = epidermis_px * (1 - slope * age)
  double epidermis_noise_px = 2.0;
  double coherence_young = 0.95;   // collagen angular coherence at age 0
  double coherence_slope = 0.009;  // per year of age
  double fibre_density_slope = 0.004;
  double nevus_base_probability = 0.05;
  double nevus_probability_at_85 = 0.6;

  void validate() const;
  nlohmann::json to_json() const;
};

struct TruthRecord {
  std::string pid;
  std::string slide_id;
  double latent_age = 0;
  double epidermis_px = 0;
  double coherence = 0;
  bool nevus = false;
};

struct SyntheticCohort {
  std::vector<Subject> subjects;
  std::vector<TruthRecord> truth;  // hidden; never written next to the cohort file
};

/// Ages uniform within bins; disease flags Bernoulli; Weibull survival with
/// administrative censoring.
SyntheticCohort gen_subjects(const GeneratorSpec& spec, std::uint64_t seed);

double epidermis_thickness(const GeneratorSpec& spec, double age);
double collagen_coherence(const GeneratorSpec& spec, double age);
double nevus_probability(const GeneratorSpec& spec, double age);

enum class Region : std::uint8_t { kBackground = 0, kEpidermis = 1, kCollagen = 2, kNevus = 3 };

struct SyntheticSlide {
  SlideRaster raster;
  Image8 mask;  // one channel, Region values
};

/// Renders the slide for one truth record. Deterministic in (spec, record, seed).
SyntheticSlide gen_slide(const GeneratorSpec& spec, const TruthRecord& truth, std::uint64_t seed);

struct SyntheticPaths {
  std::filesystem::path slides_dir;
  std::filesystem::path cohort_file;
  std::filesystem::path truth_dir;
};

/// Renders every slide (in parallel) and writes `<id>.png`, `<id>.mask.png`
/// and `<id>.json` to the slides directory, the public cohort file, and
/// `truth.json` to the truth directory. Returns every written path.
std::vector<std::filesystem::path> write_synthetic_dataset(const SyntheticPaths& paths, const GeneratorSpec& spec,
                                                           std::uint64_t seed);

/// Writes slides/<id>.png + .json + .mask.png, cohort.csv and truth/truth.json
/// under `out_dir`. Slides are rendered in parallel.
void write_synthetic_dataset(const std::filesystem::path& out_dir, const GeneratorSpec& spec, std::uint64_t seed);

/// Hidden per-subject truth written by write_synthetic_dataset.
std::vector<TruthRecord> read_truth(const std::filesystem::path& truth_file);

/// Dominant mask label inside a slide-space rectangle.
Region dominant_region(const Image8& mask, int x, int y, int w, int h);
std::string to_string(Region r);

}  // namespace histoage
