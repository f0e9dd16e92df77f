// Copyright 2026 The HistoAge Authors.
// SPDX-License-Identifier: Apache-2.0

#include "histoage/config.hpp"

#include <algorithm>
#include <functional>
#include <sstream>

#include "histoage/error.hpp"
#include "histoage/io.hpp"
#include "histoage/rng.hpp"

namespace histoage {

std::map<std::string, std::string> parse_key_values(const std::string& text) {
  std::map<std::string, std::string> out;
  std::istringstream in(text);
  std::string line;
  int number = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string();
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++number;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(number), "expected key = value");
    const auto key = trim(line.substr(0, eq));
    if (key.empty()) throw ConfigError("line " + std::to_string(number), "empty key");
    out[key] = trim(line.substr(eq + 1));
  }
  return out;
}

namespace {

struct Field {
  std::string key;
  std::function<void(const std::string&)> set;
  std::function<std::string()> get;
};

double to_double(const std::string& key, const std::string& v) {
  try {
    return parse_double(v);
  } catch (const Error&) {
    throw ConfigError(key, "not a number: '" + v + "'");
  }
}

long long to_int(const std::string& key, const std::string& v) {
  try {
    return parse_int(v);
  } catch (const Error&) {
    throw ConfigError(key, "not an integer: '" + v + "'");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes" || v == "on") return true;
  if (v == "false" || v == "0" || v == "no" || v == "off") return false;
  throw ConfigError(key, "not a boolean: '" + v + "'");
}

std::string join(const auto& values) {
  std::string out;
  for (const auto& v : values) {
    if (!out.empty()) out += ",";
    if constexpr (std::is_floating_point_v<std::decay_t<decltype(v)>>)
      out += format_number(static_cast<double>(v));
    else
      out += std::to_string(v);
  }
  return out;
}

template <typename T, std::size_t N>
void parse_list(const std::string& key, const std::string& v, std::array<T, N>& out) {
  const auto parts = split(v, ',');
  if (parts.size() != N) throw ConfigError(key, "expected " + std::to_string(N) + " comma-separated values");
  for (std::size_t i = 0; i < N; ++i) {
    if constexpr (std::is_floating_point_v<T>)
      out[i] = to_double(key, parts[i]);
    else
      out[i] = static_cast<T>(to_int(key, parts[i]));
  }
}

std::vector<Field> fields(PipelineConfig& c) {
  std::vector<Field> f;
  auto dbl = [&f](std::string key, double& ref) {
    f.push_back({key, [key, &ref](const std::string& v) { ref = to_double(key, v); },
                 [&ref] { return format_number(ref); }});
  };
  auto integer = [&f](std::string key, auto& ref) {
    f.push_back({key,
                 [key, &ref](const std::string& v) {
                   const auto n = to_int(key, v);
                   if constexpr (std::is_unsigned_v<std::decay_t<decltype(ref)>>)
                     if (n < 0) throw ConfigError(key, "must be >= 0");
                   ref = static_cast<std::decay_t<decltype(ref)>>(n);
                 },
                 [&ref] { return std::to_string(ref); }});
  };
  auto boolean = [&f](std::string key, bool& ref) {
    f.push_back({key, [key, &ref](const std::string& v) { ref = to_bool(key, v); },
                 [&ref] { return std::string(ref ? "true" : "false"); }});
  };
  auto path = [&f](std::string key, std::filesystem::path& ref) {
    f.push_back({key, [&ref](const std::string& v) { ref = v; }, [&ref] { return ref.generic_string(); }});
  };
  auto list = [&f](std::string key, auto& ref) {
    f.push_back({key, [key, &ref](const std::string& v) { parse_list(key, v, ref); }, [&ref] { return join(ref); }});
  };

  path("paths.slides", c.slides_dir);
  path("paths.cohort", c.cohort_file);
  path("paths.truth", c.truth_dir);
  path("paths.work", c.work_dir);
  f.push_back({"seed",
               [&c](const std::string& v) {
                 try {
                   std::size_t used = 0;
                   c.seed = std::stoull(v, &used);
                   if (used != v.size() || v.empty() || v[0] == '-') throw std::invalid_argument(v);
                 } catch (const std::exception&) {
                   throw ConfigError("seed", "not a 64-bit unsigned integer: '" + v + "'");
                 }
               },
               [&c] { return std::to_string(c.seed); }});
  f.push_back({"scales",
               [&c](const std::string& v) {
                 c.scales.clear();
                 for (const auto& s : split(v, ',')) {
                   try {
                     c.scales.push_back(parse_scale_tag(s));
                   } catch (const Error&) {
                     throw ConfigError("scales", "unknown scale '" + s + "'");
                   }
                 }
                 std::sort(c.scales.begin(), c.scales.end());
                 c.scales.erase(std::unique(c.scales.begin(), c.scales.end()), c.scales.end());
               },
               [&c] {
                 std::string out;
                 for (const auto s : c.scales) out += (out.empty() ? "" : ",") + to_string(s);
                 return out;
               }});

  boolean("synth.enabled", c.synth_enabled);
  dbl("synth.scale_factor", c.synth.scale_factor);
  list("synth.male_counts", c.synth.male_counts);
  list("synth.female_counts", c.synth.female_counts);
  list("synth.disease_a", c.synth.disease_a);
  list("synth.disease_b", c.synth.disease_b);
  list("synth.beta_disease", c.synth.beta_disease);
  dbl("synth.beta_age", c.synth.beta_age);
  dbl("synth.weibull_shape", c.synth.weibull_shape);
  dbl("synth.weibull_scale", c.synth.weibull_scale);
  dbl("synth.female_scale_ratio", c.synth.female_scale_ratio);
  dbl("synth.followup_cap", c.synth.followup_cap);
  dbl("synth.latent_age_sd", c.synth.latent_age_sd);
  integer("synth.slide_side", c.synth.slide_side);
  integer("synth.slide_ppi", c.synth.slide_ppi);
  dbl("synth.epidermis_px", c.synth.epidermis_px);
  dbl("synth.epidermis_slope", c.synth.epidermis_slope);
  dbl("synth.coherence_young", c.synth.coherence_young);
  dbl("synth.coherence_slope", c.synth.coherence_slope);
  dbl("synth.fibre_density_slope", c.synth.fibre_density_slope);

  dbl("foreground.min_saturation", c.foreground.min_saturation);
  dbl("foreground.max_value", c.foreground.max_value);
  dbl("foreground.min_tissue_fraction", c.foreground.min_tissue_fraction);

  dbl("augment.p_crop", c.augment.p_crop);
  dbl("augment.p_brightness", c.augment.p_brightness);
  dbl("augment.brightness_max", c.augment.brightness_max);
  integer("augment.crop_side", c.augment.crop_side);
  for (auto* view : {&c.augment.v1, &c.augment.v2}) {
    const std::string p = view == &c.augment.v1 ? "augment.v1." : "augment.v2.";
    dbl(p + "p_rotation", view->p_rotation);
    dbl(p + "p_flip", view->p_flip);
    dbl(p + "p_contrast", view->p_contrast);
    dbl(p + "p_saturation", view->p_saturation);
    dbl(p + "p_hue", view->p_hue);
    dbl(p + "rotation_max_deg", view->rotation_max_deg);
    dbl(p + "contrast_max", view->contrast_max);
    dbl(p + "saturation_max", view->saturation_max);
    dbl(p + "hue_delta", view->hue_delta);
  }

  list("cdl.widths", c.encoder.widths);
  list("cdl.depths", c.encoder.depths);
  integer("cdl.kernel", c.encoder.kernel);
  integer("cdl.input_side", c.encoder.input_side);
  integer("cdl.embed_dim.S1", c.embed_dim_s1);
  integer("cdl.embed_dim.S2", c.embed_dim_s2);
  integer("cdl.hidden", c.predictor.hidden);
  integer("cdl.epochs", c.epochs);
  integer("cdl.batch_size", c.batch_size);
  dbl("cdl.lr", c.sgd.learning_rate);
  dbl("cdl.momentum", c.sgd.momentum);
  dbl("cdl.weight_decay", c.sgd.weight_decay);
  dbl("cdl.bn_momentum", c.bn_momentum);
  boolean("cdl.recompute", c.recompute_activations);

  integer("cluster.restarts", c.kmeans.restarts);
  integer("cluster.max_iterations", c.kmeans.max_iterations);
  integer("cluster.elbow_max_k", c.elbow_max_k);

  integer("gbt.bootstraps", c.bootstrap.members);
  integer("gbt.depth", c.bootstrap.gbt.depth);
  integer("gbt.trees", c.bootstrap.gbt.trees);
  dbl("gbt.eta", c.bootstrap.gbt.eta);
  dbl("gbt.lambda", c.bootstrap.gbt.lambda);
  dbl("gbt.colsample", c.bootstrap.gbt.colsample);

  f.push_back({"epi.scale",
               [&c](const std::string& v) {
                 try {
                   c.epi_scale = parse_scale_tag(v);
                 } catch (const Error&) {
                   throw ConfigError("epi.scale", "unknown scale '" + v + "'");
                 }
               },
               [&c] { return to_string(c.epi_scale); }});
  integer("epi.folds", c.epi_folds);
  dbl("epi.cox_lambda", c.cox_lambda);
  f.push_back({"epi.disease_mode",
               [&c](const std::string& v) {
                 if (v == "flag")
                   c.disease_mode = DiseaseMode::kFlag;
                 else if (v == "probability")
                   c.disease_mode = DiseaseMode::kProbability;
                 else
                   throw ConfigError("epi.disease_mode", "expected flag or probability, got '" + v + "'");
               },
               [&c] { return std::string(c.disease_mode == DiseaseMode::kFlag ? "flag" : "probability"); }});
  dbl("epi.curve_step", c.curve_step);

  integer("attention.folds", c.attention.folds);
  integer("attention.top", c.attention_top);
  integer("montage.rows", c.montage_rows);
  integer("montage.cols", c.montage_cols);
  boolean("report.montage", c.report_montage);
  boolean("report.curves", c.report_curves);
  return f;
}

}  // namespace

bool PipelineConfig::wants(ScaleTag s) const { return std::find(scales.begin(), scales.end(), s) != scales.end(); }

std::vector<ScaleTag> PipelineConfig::trained_scales() const {
  std::vector<ScaleTag> out;
  if (wants(ScaleTag::kS1) || wants(ScaleTag::kS3) || epi_scale == ScaleTag::kS1) out.push_back(ScaleTag::kS1);
  if (wants(ScaleTag::kS2) || wants(ScaleTag::kS3) || epi_scale == ScaleTag::kS2) out.push_back(ScaleTag::kS2);
  return out;
}

int PipelineConfig::embed_dim(ScaleTag s) const {
  if (s == ScaleTag::kS1) return embed_dim_s1;
  if (s == ScaleTag::kS2) return embed_dim_s2;
  throw ContractError("no encoder for S3");
}

CdlTrainConfig PipelineConfig::cdl_config(ScaleTag s) const {
  CdlTrainConfig t;
  t.encoder = encoder;
  t.encoder.embed_dim = embed_dim(s);
  t.predictor = predictor;
  t.scale = s;
  t.epochs = epochs;
  t.batch_size = batch_size;
  t.sgd = sgd;
  // cdl.lr is the base rate for a batch of 256; linear scaling to the batch.
  t.sgd.learning_rate = sgd.learning_rate * static_cast<double>(batch_size) / 256.0;
  t.bn_momentum = bn_momentum;
  t.augment = augment;
  t.seed = derive_seed(seed, "cdl:" + to_string(s));
  t.recompute_activations = recompute_activations;
  return t;
}

void PipelineConfig::validate() const {
  if (scales.empty()) throw ConfigError("scales", "at least one scale is required");
  if (work_dir.empty()) throw ConfigError("paths.work", "must not be empty");
  synth.validate();
  for (const double v : {foreground.min_saturation, foreground.max_value, foreground.min_tissue_fraction})
    if (!(v >= 0 && v <= 1)) throw ConfigError("foreground", "thresholds must lie in [0, 1]");
  const std::pair<const char*, double> probabilities[] = {
      {"augment.p_crop", augment.p_crop},
      {"augment.p_brightness", augment.p_brightness},
      {"augment.v1.p_rotation", augment.v1.p_rotation},
      {"augment.v1.p_flip", augment.v1.p_flip},
      {"augment.v1.p_contrast", augment.v1.p_contrast},
      {"augment.v1.p_saturation", augment.v1.p_saturation},
      {"augment.v1.p_hue", augment.v1.p_hue},
      {"augment.v2.p_rotation", augment.v2.p_rotation},
      {"augment.v2.p_flip", augment.v2.p_flip},
      {"augment.v2.p_contrast", augment.v2.p_contrast},
      {"augment.v2.p_saturation", augment.v2.p_saturation},
      {"augment.v2.p_hue", augment.v2.p_hue},
  };
  for (const auto& [key, v] : probabilities) {
    // A value set through the augment.p macro is reported under that key.
    const std::string field = raw.count(key) || !raw.count("augment.p") ? key : "augment.p";
    if (!(v >= 0 && v <= 1)) throw ConfigError(field, "probability must lie in [0, 1]");
  }
  try {
    augment.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError("augment", e.what());
  }
  EncoderConfig e = encoder;
  e.embed_dim = embed_dim_s1;
  e.validate();
  if (augment.crop_side != encoder.input_side)
    throw ConfigError("augment.crop_side", "must equal cdl.input_side");
  if (embed_dim_s2 <= 0) throw ConfigError("cdl.embed_dim.S2", "must be positive");
  if (predictor.hidden < 0) throw ConfigError("cdl.hidden", "must be >= 0");
  if (epochs == 0) throw ConfigError("cdl.epochs", "must be >= 1");
  if (batch_size < 2) throw ConfigError("cdl.batch_size", "must be >= 2");
  if (!(sgd.learning_rate > 0)) throw ConfigError("cdl.lr", "must be positive");
  if (!(sgd.momentum >= 0 && sgd.momentum < 1)) throw ConfigError("cdl.momentum", "must be in [0, 1)");
  if (!(sgd.weight_decay >= 0)) throw ConfigError("cdl.weight_decay", "must be >= 0");
  if (!(bn_momentum > 0 && bn_momentum <= 1)) throw ConfigError("cdl.bn_momentum", "must be in (0, 1]");
  if (kmeans.restarts < 1) throw ConfigError("cluster.restarts", "must be >= 1");
  if (kmeans.max_iterations < 1) throw ConfigError("cluster.max_iterations", "must be >= 1");
  if (elbow_max_k < 1) throw ConfigError("cluster.elbow_max_k", "must be >= 1");
  if (bootstrap.members < 1) throw ConfigError("gbt.bootstraps", "must be >= 1");
  bootstrap.gbt.validate();
  if (epi_scale == ScaleTag::kS3 && !(wants(ScaleTag::kS3))) throw ConfigError("epi.scale", "S3 is not among the scales");
  if (!wants(epi_scale) && epi_scale != ScaleTag::kS3)
    throw ConfigError("epi.scale", to_string(epi_scale) + " is not among the scales");
  if (epi_folds < 2) throw ConfigError("epi.folds", "must be >= 2");
  if (!(cox_lambda >= 0)) throw ConfigError("epi.cox_lambda", "must be >= 0");
  if (!(curve_step > 0)) throw ConfigError("epi.curve_step", "must be positive");
  if (attention.folds < 1) throw ConfigError("attention.folds", "must be >= 1");
  if (attention_top < 1) throw ConfigError("attention.top", "must be >= 1");
  if (montage_rows < 1) throw ConfigError("montage.rows", "must be >= 1");
  if (montage_cols < 1) throw ConfigError("montage.cols", "must be >= 1");
}

std::string PipelineConfig::canonical() const {
  auto& self = const_cast<PipelineConfig&>(*this);
  auto f = fields(self);
  std::sort(f.begin(), f.end(), [](const Field& a, const Field& b) { return a.key < b.key; });
  std::string out;
  for (const auto& field : f) out += field.key + "=" + field.get() + "\n";
  return out;
}

std::string PipelineConfig::hash() const { return sha256_hex(canonical()); }

PipelineConfig config_from_key_values(const std::map<std::string, std::string>& kv) {
  PipelineConfig c;
  auto f = fields(c);
  for (const auto& [key, value] : kv) {
    if (key == "augment.p") {
      const double p = to_double(key, value);
      const auto keep = c.augment;
      c.augment = AugmentPolicy::uniform(p);
      c.augment.brightness_max = keep.brightness_max;
      c.augment.crop_side = keep.crop_side;
      continue;
    }
    const auto it = std::find_if(f.begin(), f.end(), [&](const Field& x) { return x.key == key; });
    if (it == f.end()) throw ConfigError(key, "unknown configuration key");
    it->set(value);
  }
  c.attention.gbt = c.bootstrap.gbt;
  c.bootstrap.seed = derive_seed(c.seed, "bootstrap");
  c.attention.seed = derive_seed(c.seed, "attention");
  c.raw = kv;
  c.validate();
  return c;
}

PipelineConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  std::map<std::string, std::string> kv;
  if (!path.empty()) kv = parse_key_values(read_text(path));
  for (const auto& o : overrides) {
    const auto more = parse_key_values(o);
    if (more.empty()) throw ConfigError(o, "expected key=value");
    for (const auto& [k, v] : more) kv[k] = v;
  }
  return config_from_key_values(kv);
}

}  // namespace histoage
