// Copyright 2026 The HistoAge Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "histoage/age.hpp"
#include "histoage/augment.hpp"
#include "histoage/cdl.hpp"
#include "histoage/embed.hpp"
#include "histoage/synth.hpp"
#include "histoage/tiler.hpp"

namespace histoage {

/// Flat `key = value` text. '#' starts a comment; blank lines are ignored;
/// a repeated key overrides the earlier value.
std::map<std::string, std::string> parse_key_values(const std::string& text);

enum class DiseaseMode { kFlag, kProbability };

struct PipelineConfig {
  std::filesystem::path slides_dir = "data/slides";
  std::filesystem::path cohort_file = "data/cohort.csv";
  std::filesystem::path truth_dir = "data/truth";
  std::filesystem::path work_dir = "work";
  std::uint64_t seed = 0;
  std::vector<ScaleTag> scales{ScaleTag::kS1, ScaleTag::kS2, ScaleTag::kS3};

  bool synth_enabled = false;
  GeneratorSpec synth{};

  ForegroundThresholds foreground{};
  AugmentPolicy augment{};

  EncoderConfig encoder{};  // embed_dim comes from embed_dim_s1 / embed_dim_s2
  int embed_dim_s1 = 512;
  int embed_dim_s2 = 128;
  PredictorConfig predictor{};
  std::size_t epochs = 100;
  std::size_t batch_size = 32;
  ad::SgdConfig sgd{};  // learning_rate is the base rate per 256 samples
  double bn_momentum = 0.1;
  bool recompute_activations = false;

  KMeansOptions kmeans{};
  int elbow_max_k = 6;

  BootstrapConfig bootstrap{};

  ScaleTag epi_scale = ScaleTag::kS1;  // predicted ages used downstream
  int epi_folds = 5;
  double cox_lambda = 0.1;
  DiseaseMode disease_mode = DiseaseMode::kFlag;
  double curve_step = 0.25;

  AttentionConfig attention{};
  int attention_top = 4;  // per slide
  int montage_rows = 2;
  int montage_cols = 4;

  bool report_montage = true;
  bool report_curves = true;

  /// Keys that were set explicitly, for error messages and hashing.
  std::map<std::string, std::string> raw;

  bool wants(ScaleTag s) const;
  /// Scales whose encoder must be trained (S3 needs S1 and S2).
  std::vector<ScaleTag> trained_scales() const;
  int embed_dim(ScaleTag s) const;
  CdlTrainConfig cdl_config(ScaleTag s) const;

  /// Throws ConfigError naming the field.
  void validate() const;
  /// Canonical `key=value` lines of every field, sorted by key.
  std::string canonical() const;
  /// SHA-256 of canonical().
  std::string hash() const;
};

/// Applies key/value pairs over the defaults. Unknown keys and unparsable
/// values throw ConfigError naming the key.
PipelineConfig config_from_key_values(const std::map<std::string, std::string>& kv);
PipelineConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

}  // namespace histoage
