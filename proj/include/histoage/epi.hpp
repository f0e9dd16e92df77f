// Copyright 2026 The HistoAge Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "histoage/matrix.hpp"

namespace histoage {

enum class Disease { kHeart, kCancer, kHypertension, kCopd, kJoint, kOsteoarthritis, kOsteoporosis };
inline constexpr std::size_t kDiseaseCount = 7;
/// Column order of the cohort file and of the tables.
inline constexpr std::array<Disease, kDiseaseCount> kDiseases{
    Disease::kHeart, Disease::kCancer,         Disease::kHypertension, Disease::kCopd,
    Disease::kJoint, Disease::kOsteoarthritis, Disease::kOsteoporosis};

std::string display_name(Disease d);  // "Heart Disease", ...
std::string column_name(Disease d);   // "heart", "cancer", "htn", "copd", "joint", "oa", "op"

/// Skin conditions are recognised but never enter the models.
enum class SkinCondition { kAtopicDermatitis, kPsoriasis, kAcne, kRosacea };
std::string display_name(SkinCondition s);

struct Icd10Groups {
  std::vector<Disease> diseases;  // I11 and I13 belong to two groups
  std::optional<SkinCondition> skin;
  bool empty() const { return diseases.empty() && !skin; }
};

/// Throws ContractError (echoing the code) unless it looks like A00 or A00.0.
Icd10Groups map_icd10(std::string_view code);

struct Subject {
  std::string pid;
  int sex = 0;  // 0 male, 1 female
  double age = 0;
  std::string biopsy_date;  // YYYY-MM-DD
  std::array<int, kDiseaseCount> disease{};
  double followup_years = 0;
  int event = 0;
};

/// Cohort CSV `pid,sex,age,biopsy_date,heart,cancer,htn,copd,joint,oa,op,followup_years,event`.
void write_cohort(const std::filesystem::path& path, std::span<const Subject> subjects);
std::vector<Subject> read_cohort(const std::filesystem::path& path);

// Logistic regression ------------------------------------------------------

struct LogisticFit {
  std::vector<double> beta;  // intercept first
  double log_likelihood = 0;  // unpenalised
  double gradient_norm = 0;
  int iterations = 0;

  double probability(std::span<const double> x) const;
};

/// Newton iterations with step halving on log L(beta) - ridge/2 * |beta[1:]|^2;
/// the intercept is not penalised. x excludes the intercept column.
/// Throws ContractError on single-class labels and NumericError (with the
/// gradient norm) after 100 steps without convergence.
LogisticFit fit_logistic(const Matrix& x, std::span<const int> y, double ridge = 1e-6);
double logistic_log_likelihood(const Matrix& x, std::span<const int> y, std::span<const double> beta);

struct AccuracyEstimate {
  double cv = 0;         // mean over stratified folds, threshold 0.5
  double in_sample = 0;  // fit and score on all rows
  std::vector<double> oof_probability;  // out-of-fold probability per row
};

AccuracyEstimate classification_accuracy(const Matrix& x, std::span<const int> y, int folds, std::uint64_t seed,
                                         double ridge = 1e-6);

enum class AgeSource { kActual, kPredicted, kCombined };

struct AccuracyRow {
  int sex = 0;
  Disease disease = Disease::kHeart;
  std::array<AccuracyEstimate, 3> by_source;  // indexed by AgeSource
  std::string skipped;  // non-empty when the fit was refused
};

/// Sex-stratified prevalent-disease classification with actual, predicted
/// and both ages. `predicted_age` is keyed by pid.
std::vector<AccuracyRow> classify_diseases(std::span<const Subject> subjects,
                                           const std::map<std::string, double>& predicted_age, int folds,
                                           std::uint64_t seed);

// Cox proportional hazards ---------------------------------------------------

struct CoxData {
  std::vector<std::string> names;
  Matrix x;
  std::vector<double> time;
  std::vector<int> event;
  std::vector<int> stratum;
};

/// Stratified Breslow log partial likelihood.
double cox_log_partial_likelihood(const CoxData& data, std::span<const double> beta);

struct CoxFit {
  std::vector<std::string> names;
  std::vector<double> beta;
  std::vector<double> se;
  std::vector<double> hr;
  std::vector<double> ci_lo;
  std::vector<double> ci_hi;
  double lambda = 0;  // penalty actually used
  double log_likelihood = 0;
  int iterations = 0;
  std::vector<std::string> warnings;

  struct Baseline {
    std::vector<double> time;
    std::vector<double> cumhaz;  // at x = 0
    double max_followup = 0;
  };
  std::map<int, Baseline> baseline;
};

/// Maximises log PL - lambda/2 |beta|^2 by Newton with step halving. Wald
/// intervals use the penalised information. A non positive definite
/// information matrix escalates lambda by 10 with a warning.
CoxFit fit_cox(const CoxData& data, double lambda = 0.1);

struct SurvivalPoint {
  double t = 0;
  double survival = 1;
  bool extrapolated = false;  // beyond the stratum's follow-up; held flat
};

std::vector<SurvivalPoint> survival_curve(const CoxFit& fit, int stratum, std::span<const double> profile,
                                          std::span<const double> t_grid);

struct KaplanMeierPoint {
  double t = 0;
  double survival = 1;
};
std::vector<KaplanMeierPoint> kaplan_meier(std::span<const double> time, std::span<const int> event);

/// Builds (age, diseases) Cox data from subjects, stratified by sex.
/// `age` and `disease` override the subject fields when given.
CoxData cox_data(std::span<const Subject> subjects, std::span<const double> age = {},
                 const std::vector<std::array<double, kDiseaseCount>>* disease = nullptr);

struct HazardRow {
  std::string covariate;
  std::string arm;  // "actual" or "predicted"
  double hr = 0;
  double ci_lo = 0;
  double ci_hi = 0;
};

struct HazardComparison {
  CoxFit actual;
  CoxFit predicted;
  std::vector<HazardRow> rows;
  std::map<std::string, bool> overlap;  // per covariate, CIs intersect
};

/// Arm "actual": observed age and registry flags. Arm "predicted": predicted
/// age and classifier disease indicators.
HazardComparison hazard_comparison(std::span<const Subject> subjects, std::span<const double> predicted_age,
                                   const std::vector<std::array<double, kDiseaseCount>>& predicted_disease,
                                   double lambda = 0.1);

}  // namespace histoage
