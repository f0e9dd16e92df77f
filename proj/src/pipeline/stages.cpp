// Copyright 2026 The HistoAge Authors.
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <set>

#include <json.hpp>

#include "histoage/age.hpp"
#include "histoage/cdl.hpp"
#include "histoage/embed.hpp"
#include "histoage/epi.hpp"
#include "histoage/error.hpp"
#include "histoage/io.hpp"
#include "histoage/parallel.hpp"
#include "histoage/pipeline.hpp"
#include "histoage/report.hpp"
#include "histoage/rng.hpp"
#include "histoage/synth.hpp"

namespace histoage {

namespace fs = std::filesystem;
using nlohmann::json;

const std::vector<std::string>& stage_names() {
  static const std::vector<std::string> names{"synth",    "tile",     "pretrain", "embed",     "cluster",
                                              "predict-age", "classify", "survive", "attention", "report"};
  return names;
}

namespace {

// Non-finite values are written as empty cells.
std::string num(double v) { return std::isfinite(v) ? format_number(v) : std::string(); }
double cell(const std::string& s) { return s.empty() ? std::numeric_limits<double>::quiet_NaN() : parse_double(s); }
std::string sex_label(int sex) { return sex == 0 ? "M" : "F"; }
std::string no_commas(std::string s) {
  std::replace(s.begin(), s.end(), ',', ';');
  std::replace(s.begin(), s.end(), '\n', ' ');
  return s;
}

void log(const std::string& line) { std::fprintf(stderr, "%s\n", line.c_str()); }

/// Tracks one stage's inputs and outputs and writes its manifest.
class StageRun {
 public:
  StageRun(std::string name, const PipelineConfig& config)
      : name_(std::move(name)), config_(config), layout_{config.work_dir},
        start_(std::chrono::steady_clock::now()) {}

  const WorkLayout& layout() const { return layout_; }

  fs::path require(const fs::path& p) {
    if (!fs::exists(p)) throw MissingArtifactError(p.generic_string());
    if (fs::is_regular_file(p)) inputs_.push_back(p);
    return p;
  }

  fs::path output(const fs::path& p) {
    outputs_.push_back(p);
    return p;
  }

  /// Empties a directory this stage owns. Every file left in it at finish()
  /// must have been declared.
  fs::path own(const fs::path& dir) {
    fs::remove_all(dir);
    fs::create_directories(dir);
    owned_.push_back(dir);
    return dir;
  }

  StageRecord finish() {
    std::set<fs::path> declared;
    for (const auto& p : outputs_) declared.insert(p.lexically_normal());
    for (const auto& dir : owned_)
      for (const auto& e : fs::recursive_directory_iterator(dir))
        if (e.is_regular_file() && !declared.count(e.path().lexically_normal()))
          throw ContractError("stage " + name_ + " wrote an undeclared file: " + e.path().generic_string());

    StageRecord rec;
    rec.stage = name_;
    json manifest = {{"stage", name_}, {"config_hash", config_.hash()}};
    auto list = [&](const std::vector<fs::path>& paths, std::vector<std::string>& names, const char* key) {
      std::vector<fs::path> unique;
      std::set<fs::path> seen;
      for (const auto& p : paths)
        if (seen.insert(p.lexically_normal()).second) unique.push_back(p);
      std::vector<std::string> hashes(unique.size());
      parallel_for(unique.size(), [&](std::size_t i) {
        if (!fs::exists(unique[i])) throw MissingArtifactError(unique[i].generic_string());
        hashes[i] = sha256_file(unique[i]);
      });
      json arr = json::array();
      for (std::size_t i = 0; i < unique.size(); ++i) {
        names.push_back(label(unique[i]));
        arr.push_back({{"path", names.back()}, {"sha256", hashes[i]}});
      }
      manifest[key] = arr;
    };
    list(inputs_, rec.inputs, "inputs");
    list(outputs_, rec.outputs, "outputs");
    write_text(layout_.manifests() / (name_ + ".json"), manifest.dump(1) + "\n");

    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start_).count();
    json timings = json::object();
    if (fs::exists(layout_.timings())) {
      try {
        timings = json::parse(read_text(layout_.timings()));
      } catch (const std::exception&) {
        timings = json::object();
      }
    }
    timings[name_] = rec.seconds;
    write_text(layout_.timings(), timings.dump(1) + "\n");
    return rec;
  }

 private:
  std::string label(const fs::path& p) const {
    const auto rel = p.lexically_normal().lexically_relative(layout_.root.lexically_normal());
    if (!rel.empty() && *rel.begin() != "..") return "work/" + rel.generic_string();
    return p.generic_string();
  }

  std::string name_;
  const PipelineConfig& config_;
  WorkLayout layout_;
  std::chrono::steady_clock::time_point start_;
  std::vector<fs::path> inputs_;
  std::vector<fs::path> outputs_;
  std::vector<fs::path> owned_;
};

// Shared loaders ---------------------------------------------------------------

std::vector<Subject> load_cohort(StageRun& run, const PipelineConfig& c) {
  return read_cohort(run.require(c.cohort_file));
}

/// slide id -> subject pid, from the sidecars.
std::map<std::string, std::string> slide_subjects(StageRun& run, const PipelineConfig& c,
                                                  const std::vector<std::string>& slide_ids) {
  std::map<std::string, std::string> out;
  for (const auto& id : slide_ids) {
    if (out.count(id)) continue;
    out[id] = read_sidecar(run.require(c.slides_dir / (id + ".json"))).subject_pid;
  }
  return out;
}

std::map<std::string, double> load_predicted_ages(StageRun& run, const PipelineConfig& c) {
  std::map<std::string, double> out;
  for (const auto& p : read_predictions(run.require(run.layout().age(c.epi_scale) / "predictions.csv")))
    out[p.pid] = p.point;
  return out;
}

ScaleTag patch_scale(const PipelineConfig& c) { return c.epi_scale == ScaleTag::kS3 ? ScaleTag::kS1 : c.epi_scale; }

// Stages -----------------------------------------------------------------------

void stage_synth(StageRun& run, const PipelineConfig& c) {
  if (!c.synth_enabled) throw ConfigError("synth.enabled", "the synth stage needs synth.enabled = true");
  // Only a directory this stage created before may be wiped.
  const auto marker = c.slides_dir / ".synthetic";
  if (fs::exists(c.slides_dir)) {
    if (fs::exists(marker))
      fs::remove_all(c.slides_dir);
    else if (!fs::is_empty(c.slides_dir))
      throw ContractError("refusing to overwrite slides not written by synth: " + c.slides_dir.generic_string());
  }
  fs::remove(c.truth_dir / "truth.json");
  const auto written =
      write_synthetic_dataset({c.slides_dir, c.cohort_file, c.truth_dir}, c.synth, derive_seed(c.seed, "synth"));
  write_text(marker, "written by the synth stage; removed on rerun\n");
  for (const auto& p : written) run.output(p);
  run.output(marker);
  log("synth: " + std::to_string(written.size()) + " files");
}

void stage_tile(StageRun& run, const PipelineConfig& c) {
  run.require(c.slides_dir);
  const auto slides = list_slides(c.slides_dir);
  if (slides.empty()) throw MissingArtifactError((c.slides_dir / "*.json").generic_string());
  for (const auto& id : slides) {
    run.require(c.slides_dir / (id + ".json"));
    const auto png = c.slides_dir / (id + ".png");
    run.require(fs::exists(png) ? png : c.slides_dir / (id + ".tif"));
  }
  for (const auto scale : c.trained_scales()) {
    const auto dir = run.own(run.layout().tiles(scale));
    PatchStoreWriter store(run.output(dir / "patches.bin"));
    std::vector<TileRow> index;
    // Chunks bound memory; order within and across chunks is slide order.
    const std::size_t chunk = std::max<std::size_t>(1, worker_count() * 2);
    for (std::size_t begin = 0; begin < slides.size(); begin += chunk) {
      const std::size_t n = std::min(chunk, slides.size() - begin);
      std::vector<std::vector<TileRow>> rows(n);
      std::vector<std::vector<Image8>> kept(n);
      parallel_for(n, [&](std::size_t k) {
        const auto slide = load_slide(c.slides_dir, slides[begin + k]);
        for (const auto& p : tile(slide, scale)) {
          const auto raw = crop(slide.pixels, p.origin_x, p.origin_y, p.extent_w, p.extent_h);
          TileRow row{p.slide_id, p.patch_id, p.origin_x, p.origin_y, p.side_px, scale, false, -1};
          row.foreground = foreground_filter(raw, c.foreground);
          if (row.foreground) kept[k].push_back(to_u8(downscale(raw)));
          rows[k].push_back(std::move(row));
        }
      });
      for (std::size_t k = 0; k < n; ++k) {
        for (auto& r : rows[k]) index.push_back(std::move(r));
        for (const auto& img : kept[k]) store.append(img);
      }
    }
    store.close();
    write_tile_index(run.output(dir / "index.csv"), index);
    log("tile " + to_string(scale) + ": " + std::to_string(index.size()) + " patches, " +
        std::to_string(store.count()) + " foreground");
  }
}

void stage_pretrain(StageRun& run, const PipelineConfig& c) {
  for (const auto scale : c.trained_scales()) {
    const auto tiles = run.layout().tiles(scale);
    run.require(tiles / "index.csv");
    const auto patches = read_patch_store(run.require(tiles / "patches.bin"));
    if (patches.empty()) throw ContractError("no foreground patches at " + to_string(scale));
    const auto dir = run.own(run.layout().model(scale));
    const auto cfg = c.cdl_config(scale);
    const auto result = train_cdl(patches, cfg, [&](const EpochRecord& e) {
      log("pretrain " + to_string(scale) + " epoch " + std::to_string(e.epoch + 1) + "/" +
          std::to_string(cfg.epochs) + " loss " + format_fixed(e.loss, 4) + " std " +
          format_fixed(e.embedding_std, 4) + (e.aborted ? " (aborted)" : ""));
    });
    save_checkpoint(run.output(dir / "checkpoint.cdl"), result.network, scale);
    CsvTable loss;
    loss.header = {"epoch", "learning_rate", "loss", "embedding_std", "aborted"};
    for (const auto& e : result.epochs)
      loss.rows.push_back({std::to_string(e.epoch), num(e.learning_rate), num(e.loss), num(e.embedding_std),
                           e.aborted ? "1" : "0"});
    write_csv(run.output(dir / "loss.csv"), loss);
    json summary = {{"patches", patches.size()},
                    {"collapse_detected", result.collapse_detected},
                    {"warnings", result.warnings}};
    write_text(run.output(dir / "train.json"), summary.dump(1) + "\n");
    for (const auto& w : result.warnings) log("pretrain " + to_string(scale) + " warning: " + w);
  }
}

void stage_embed(StageRun& run, const PipelineConfig& c) {
  for (const auto scale : c.trained_scales()) {
    const auto tiles = run.layout().tiles(scale);
    const auto index = read_tile_index(run.require(tiles / "index.csv"));
    const auto patches = read_patch_store(run.require(tiles / "patches.bin"));
    const auto checkpoint = load_checkpoint(run.require(run.layout().model(scale) / "checkpoint.cdl"));
    const auto dir = run.own(run.layout().embeddings(scale));
    EmbeddingTable table;
    table.scale_tag = to_string(scale);
    for (const auto& r : index)
      if (r.foreground) {
        table.patch_ids.push_back(r.patch_id);
        table.slide_ids.push_back(r.slide_id);
      }
    if (table.patch_ids.size() != patches.size())
      throw ContractError("tile index and patch store disagree at " + to_string(scale));
    table.rows = extract_features(checkpoint, patches, scale);
    write_embeddings(run.output(dir / "embeddings.csv"), table, run.output(dir / "embeddings.emb"));
    log("embed " + to_string(scale) + ": " + std::to_string(table.rows.size()) + " rows");
  }
}

void stage_cluster(StageRun& run, const PipelineConfig& c) {
  std::map<ScaleTag, std::vector<SlideFeature>> done;
  for (const auto scale : c.trained_scales()) {
    const auto table = read_embeddings(run.require(run.layout().embeddings(scale) / "embeddings.csv"));
    std::map<std::string, Points> by_slide;
    Points all;
    for (std::size_t i = 0; i < table.rows.size(); ++i) {
      std::vector<double> row(table.rows[i].begin(), table.rows[i].end());
      by_slide[table.slide_ids[i]].push_back(row);
      all.push_back(std::move(row));
    }
    std::vector<std::pair<std::string, Points>> slides(by_slide.begin(), by_slide.end());
    std::vector<SlideFeature> features(slides.size());
    const auto seed = derive_seed(c.seed, "cluster:" + to_string(scale));
    parallel_for(slides.size(), [&](std::size_t i) {
      features[i] = cluster_slide(slides[i].first, to_string(scale), slides[i].second, seed);
    });
    const auto dir = run.own(run.layout().features(scale));
    write_slide_features(run.output(dir / "slide_features.csv"), features);
    CsvTable elbow;
    elbow.header = {"k", "inertia"};
    if (!all.empty()) {
      const int k_max = std::min<int>(c.elbow_max_k, static_cast<int>(all.size()));
      const auto curve = inertia_curve(all, k_max, derive_seed(c.seed, "elbow:" + to_string(scale)));
      for (std::size_t k = 0; k < curve.size(); ++k) elbow.rows.push_back({std::to_string(k + 1), num(curve[k])});
    }
    write_csv(run.output(dir / "elbow.csv"), elbow);
    log("cluster " + to_string(scale) + ": " + std::to_string(features.size()) + " slides");
    done[scale] = std::move(features);
  }
  if (c.wants(ScaleTag::kS3)) {
    const auto combined = combine_all(done.at(ScaleTag::kS1), done.at(ScaleTag::kS2));
    const auto dir = run.own(run.layout().features(ScaleTag::kS3));
    write_slide_features(run.output(dir / "slide_features.csv"), combined.features);
    CsvTable excluded;
    excluded.header = {"reason"};
    for (const auto& e : combined.excluded) excluded.rows.push_back({no_commas(e)});
    write_csv(run.output(dir / "excluded.csv"), excluded);
    log("cluster S3: " + std::to_string(combined.features.size()) + " slides, " +
        std::to_string(combined.excluded.size()) + " excluded");
  }
}

void write_mae(const fs::path& path, const std::vector<MaeRow>& rows) {
  CsvTable t;
  t.header = {"sex", "age_group", "count", "mae", "ci_lo", "ci_hi"};
  for (const auto& r : rows)
    t.rows.push_back({sex_label(r.sex), r.bin, std::to_string(r.count), num(r.mae), num(r.lo), num(r.hi)});
  write_csv(path, t);
}

std::vector<MaeRow> read_mae(const fs::path& path) {
  const auto t = read_csv(path);
  const auto cs = t.column("sex"), cb = t.column("age_group"), cn = t.column("count"), cm = t.column("mae"),
             cl = t.column("ci_lo"), ch = t.column("ci_hi");
  std::vector<MaeRow> out;
  for (const auto& r : t.rows)
    out.push_back({r[cs] == "M" ? 0 : 1, r[cb], static_cast<std::size_t>(parse_int(r[cn])), cell(r[cm]), cell(r[cl]),
                   cell(r[ch])});
  return out;
}

void stage_predict_age(StageRun& run, const PipelineConfig& c) {
  const auto cohort = load_cohort(run, c);
  std::map<std::string, const Subject*> by_pid;
  for (const auto& s : cohort) by_pid[s.pid] = &s;
  for (const auto scale : c.scales) {
    const auto features = read_slide_features(run.require(run.layout().features(scale) / "slide_features.csv"));
    std::vector<std::string> ids;
    for (const auto& f : features) ids.push_back(f.slide_id);
    const auto pids = slide_subjects(run, c, ids);
    std::vector<std::vector<double>> rows;
    std::vector<double> ages;
    std::vector<int> sexes;
    std::vector<std::string> kept;
    CsvTable excluded;
    excluded.header = {"slide_id", "reason"};
    std::set<std::string> used;
    for (const auto& f : features) {
      const auto& pid = pids.at(f.slide_id);
      const auto it = by_pid.find(pid);
      if (it == by_pid.end()) {
        excluded.rows.push_back({f.slide_id, "subject " + pid + " not in cohort"});
        continue;
      }
      if (!used.insert(pid).second) {
        excluded.rows.push_back({f.slide_id, "subject " + pid + " already has a slide"});
        continue;
      }
      rows.push_back(f.values);
      ages.push_back(it->second->age);
      sexes.push_back(it->second->sex);
      kept.push_back(pid);
    }
    if (rows.empty()) throw ContractError("predict-age: no slides matched the cohort at " + to_string(scale));
    const auto result = bootstrap_fit_predict(Matrix::from_rows(rows), ages, sexes, kept, c.bootstrap);
    const auto dir = run.own(run.layout().age(scale));
    write_predictions(run.output(dir / "predictions.csv"), result.predictions);
    write_mae(run.output(dir / "mae.csv"), mae_table(result));
    write_csv(run.output(dir / "excluded.csv"), excluded);
    log("predict-age " + to_string(scale) + ": " + std::to_string(kept.size()) + " subjects");
  }
}

void stage_classify(StageRun& run, const PipelineConfig& c) {
  const auto cohort = load_cohort(run, c);
  const auto predicted = load_predicted_ages(run, c);
  std::vector<Subject> subjects;
  for (const auto& s : cohort)
    if (predicted.count(s.pid)) subjects.push_back(s);
  const auto rows = classify_diseases(subjects, predicted, c.epi_folds, derive_seed(c.seed, "classify"));

  const auto dir = run.own(run.layout().epi() / "classify");
  CsvTable acc;
  acc.header = {"sex", "disease", "source", "cv_accuracy", "in_sample_accuracy", "skipped"};
  static const char* kSources[] = {"actual", "predicted", "combined"};
  for (const auto& r : rows)
    for (int src = 0; src < 3; ++src)
      acc.rows.push_back({sex_label(r.sex), column_name(r.disease), kSources[src], num(r.by_source[src].cv),
                          num(r.by_source[src].in_sample), no_commas(r.skipped)});
  write_csv(run.output(dir / "accuracy.csv"), acc);

  // Out-of-fold probabilities of the predicted-age model. A refused fit means
  // the label is constant within that sex, so the registry flag is the
  // majority-class prediction.
  std::map<std::string, std::array<double, kDiseaseCount>> prob;
  for (const int sex : {0, 1}) {
    std::vector<const Subject*> group;
    for (const auto& s : subjects)
      if (s.sex == sex) group.push_back(&s);
    for (const auto& r : rows) {
      if (r.sex != sex) continue;
      const auto k = static_cast<std::size_t>(r.disease);
      const auto& oof = r.by_source[static_cast<int>(AgeSource::kPredicted)].oof_probability;
      for (std::size_t i = 0; i < group.size(); ++i)
        prob[group[i]->pid][k] = r.skipped.empty() ? oof.at(i) : group[i]->disease[k];
    }
  }
  CsvTable pd;
  pd.header = {"pid"};
  for (const auto d : kDiseases) pd.header.push_back(column_name(d));
  for (const auto& s : subjects) {
    std::vector<std::string> row{s.pid};
    for (std::size_t k = 0; k < kDiseaseCount; ++k) row.push_back(num(prob.at(s.pid)[k]));
    pd.rows.push_back(std::move(row));
  }
  write_csv(run.output(dir / "predicted_diseases.csv"), pd);
  std::size_t skipped = 0;
  for (const auto& r : rows) skipped += !r.skipped.empty();
  log("classify: " + std::to_string(subjects.size()) + " subjects, " + std::to_string(skipped) + " fits refused");
}

std::vector<double> grid(double step, double t_end) {
  std::vector<double> g;
  const auto n = static_cast<std::size_t>(std::floor(t_end / step + 1e-9));
  for (std::size_t i = 0; i <= n; ++i) g.push_back(static_cast<double>(i) * step);
  return g;
}

void stage_survive(StageRun& run, const PipelineConfig& c) {
  const auto cohort = load_cohort(run, c);
  const auto predicted = load_predicted_ages(run, c);
  const auto pd = read_csv(run.require(run.layout().epi() / "classify" / "predicted_diseases.csv"));
  std::map<std::string, std::array<double, kDiseaseCount>> prob;
  for (const auto& r : pd.rows) {
    std::array<double, kDiseaseCount> p{};
    for (std::size_t k = 0; k < kDiseaseCount; ++k) {
      p[k] = parse_double(r[pd.column(column_name(kDiseases[k]))]);
      if (c.disease_mode == DiseaseMode::kFlag) p[k] = p[k] >= 0.5 ? 1.0 : 0.0;
    }
    prob[r[pd.column("pid")]] = p;
  }
  std::vector<Subject> subjects;
  std::vector<double> age;
  std::vector<std::array<double, kDiseaseCount>> disease;
  for (const auto& s : cohort) {
    const auto a = predicted.find(s.pid);
    const auto d = prob.find(s.pid);
    if (a == predicted.end() || d == prob.end()) continue;
    subjects.push_back(s);
    age.push_back(a->second);
    disease.push_back(d->second);
  }
  const auto cmp = hazard_comparison(subjects, age, disease, c.cox_lambda);

  const auto dir = run.own(run.layout().epi() / "survive");
  CsvTable hr;
  hr.header = {"covariate", "arm", "hr", "ci_lo", "ci_hi"};
  for (const auto& r : cmp.rows) hr.rows.push_back({r.covariate, r.arm, num(r.hr), num(r.ci_lo), num(r.ci_hi)});
  write_csv(run.output(dir / "hazard_ratios.csv"), hr);

  const auto t_grid = grid(c.curve_step, c.synth.followup_cap);
  CsvTable curves;
  curves.header = {"stratum", "t", "survival"};
  json fits = json::object();
  const std::array<std::pair<const char*, const CoxFit*>, 2> arms{{{"actual", &cmp.actual}, {"predicted", &cmp.predicted}}};
  const std::array<CoxData, 2> data{cox_data(subjects), cox_data(subjects, age, &disease)};
  for (std::size_t a = 0; a < 2; ++a) {
    const auto& fit = *arms[a].second;
    json strata = json::object();
    for (const int sex : {0, 1}) {
      if (!fit.baseline.count(sex)) continue;
      // Curve at the stratum's mean covariate profile.
      std::vector<double> profile(data[a].x.cols(), 0.0);
      std::size_t n = 0;
      for (std::size_t i = 0; i < data[a].x.rows(); ++i) {
        if (data[a].stratum[i] != sex) continue;
        ++n;
        for (std::size_t j = 0; j < profile.size(); ++j) profile[j] += data[a].x(i, j);
      }
      for (auto& v : profile) v /= static_cast<double>(std::max<std::size_t>(n, 1));
      for (const auto& p : survival_curve(fit, sex, profile, t_grid))
        curves.rows.push_back({std::string(arms[a].first) + ":" + sex_label(sex), num(p.t), num(p.survival)});
      strata[sex_label(sex)] = {{"max_followup", fit.baseline.at(sex).max_followup}, {"profile", profile}};
    }
    fits[arms[a].first] = {{"names", fit.names}, {"beta", fit.beta},       {"se", fit.se},
                           {"lambda", fit.lambda}, {"iterations", fit.iterations}, {"log_likelihood", fit.log_likelihood},
                           {"warnings", fit.warnings}, {"strata", strata}};
  }
  // Observed Kaplan-Meier per sex for reference.
  for (const int sex : {0, 1}) {
    std::vector<double> t;
    std::vector<int> e;
    for (const auto& s : subjects)
      if (s.sex == sex) {
        t.push_back(s.followup_years);
        e.push_back(s.event);
      }
    if (t.empty()) continue;
    const auto km = kaplan_meier(t, e);
    for (const double g : t_grid) {
      double surv = 1.0;
      for (const auto& p : km)
        if (p.t <= g) surv = p.survival;
      curves.rows.push_back({"km:" + sex_label(sex), num(g), num(surv)});
    }
  }
  write_csv(run.output(dir / "curves.csv"), curves);
  json overlap = json::object();
  for (const auto& [k, v] : cmp.overlap) overlap[k] = v;
  fits["overlap"] = overlap;
  fits["disease_mode"] = c.disease_mode == DiseaseMode::kFlag ? "flag" : "probability";
  fits["subjects"] = subjects.size();
  write_text(run.output(dir / "cox.json"), fits.dump(1) + "\n");
  for (const auto& w : cmp.actual.warnings) log("survive actual: " + w);
  for (const auto& w : cmp.predicted.warnings) log("survive predicted: " + w);
  log("survive: " + std::to_string(subjects.size()) + " subjects");
}

struct PatchRegion {
  std::string region = "n/a";
  double epidermis_fraction = std::numeric_limits<double>::quiet_NaN();
};

void stage_attention(StageRun& run, const PipelineConfig& c) {
  const auto scale = patch_scale(c);
  const auto cohort = load_cohort(run, c);
  std::map<std::string, const Subject*> by_pid;
  for (const auto& s : cohort) by_pid[s.pid] = &s;
  const auto index = read_tile_index(run.require(run.layout().tiles(scale) / "index.csv"));
  const auto table = read_embeddings(run.require(run.layout().embeddings(scale) / "embeddings.csv"));
  const auto pids = slide_subjects(run, c, table.slide_ids);

  std::vector<std::vector<double>> rows;
  std::vector<std::string> patch_ids, slide_ids;
  std::vector<double> ages;
  for (std::size_t i = 0; i < table.rows.size(); ++i) {
    const auto it = by_pid.find(pids.at(table.slide_ids[i]));
    if (it == by_pid.end()) continue;
    rows.emplace_back(table.rows[i].begin(), table.rows[i].end());
    patch_ids.push_back(table.patch_ids[i]);
    slide_ids.push_back(table.slide_ids[i]);
    ages.push_back(it->second->age);
  }
  if (rows.empty()) throw ContractError("attention: no patches matched the cohort");
  const auto ranked = rank_attention_patches(Matrix::from_rows(rows), patch_ids, slide_ids, ages, c.attention);
  const auto top = top_per_slide(ranked, static_cast<std::size_t>(c.attention_top));

  // Region labels from synthetic masks, when present.
  std::map<std::string, const TileRow*> tile_of;
  for (const auto& r : index) tile_of[r.patch_id] = &r;
  std::vector<std::string> mask_slides;
  for (const auto& [id, pid] : pids)
    if (fs::exists(c.slides_dir / (id + ".mask.png"))) mask_slides.push_back(id);
  std::map<std::string, PatchRegion> region;
  {
    std::map<std::string, std::vector<std::string>> by_slide;
    for (const auto& p : ranked) by_slide[p.slide_id].push_back(p.patch_id);
    std::vector<std::vector<std::pair<std::string, PatchRegion>>> found(mask_slides.size());
    for (const auto& id : mask_slides) run.require(c.slides_dir / (id + ".mask.png"));
    parallel_for(mask_slides.size(), [&](std::size_t k) {
      const auto& id = mask_slides[k];
      const auto mask = read_png(c.slides_dir / (id + ".mask.png"));
      for (const auto& pid : by_slide[id]) {
        const auto* t = tile_of.at(pid);
        const int w = std::min(t->side_px, mask.width - t->origin_x);
        const int h = std::min(t->side_px, mask.height - t->origin_y);
        std::size_t epi = 0;
        for (int y = 0; y < h; ++y)
          for (int x = 0; x < w; ++x) epi += mask.at(t->origin_x + x, t->origin_y + y)[0] == 1;
        PatchRegion r;
        r.region = to_string(dominant_region(mask, t->origin_x, t->origin_y, w, h));
        r.epidermis_fraction = static_cast<double>(epi) / (static_cast<double>(w) * h);
        found[k].emplace_back(pid, r);
      }
    });
    for (auto& f : found)
      for (auto& [pid, r] : f) region[pid] = r;
  }
  auto region_of = [&](const std::string& pid) { return region.count(pid) ? region.at(pid) : PatchRegion{}; };

  const auto dir = run.own(run.layout().attention());
  auto write_ranked = [&](const fs::path& path, const std::vector<PatchScore>& list) {
    CsvTable t;
    t.header = {"rank", "patch_id", "slide_id", "actual_age", "predicted_age", "error", "region", "epidermis_fraction"};
    for (std::size_t i = 0; i < list.size(); ++i) {
      const auto r = region_of(list[i].patch_id);
      t.rows.push_back({std::to_string(i + 1), list[i].patch_id, list[i].slide_id, num(list[i].actual),
                        num(list[i].predicted), num(list[i].error), r.region, num(r.epidermis_fraction)});
    }
    write_csv(path, t);
  };
  write_ranked(run.output(dir / "ranked.csv"), ranked);
  write_ranked(run.output(dir / "top.csv"), top);

  // Enrichment of each region (and of any visible epidermis) among top patches.
  json enrichment = {{"top_patches", top.size()}, {"all_patches", ranked.size()}, {"masks", !mask_slides.empty()}};
  if (!mask_slides.empty()) {
    constexpr double kEpidermisPresent = 0.02;
    auto share = [&](const std::vector<PatchScore>& list, const auto& pred) {
      std::size_t hit = 0;
      for (const auto& p : list) hit += pred(region_of(p.patch_id));
      return list.empty() ? 0.0 : static_cast<double>(hit) / static_cast<double>(list.size());
    };
    json regions = json::object();
    for (const auto r : {Region::kBackground, Region::kEpidermis, Region::kCollagen, Region::kNevus}) {
      const auto name = to_string(r);
      const auto is = [&](const PatchRegion& x) { return x.region == name; };
      const double ft = share(top, is), fa = share(ranked, is);
      regions[name] = {{"top_fraction", ft}, {"all_fraction", fa}, {"ratio", fa > 0 ? json(ft / fa) : json(nullptr)}};
    }
    const auto has_epi = [&](const PatchRegion& x) { return x.epidermis_fraction >= kEpidermisPresent; };
    const double ft = share(top, has_epi), fa = share(ranked, has_epi);
    enrichment["dominant_region"] = regions;
    enrichment["epidermis_present"] = {{"min_fraction", kEpidermisPresent},
                                       {"top_fraction", ft},
                                       {"all_fraction", fa},
                                       {"ratio", fa > 0 ? json(ft / fa) : json(nullptr)}};
  }
  write_text(run.output(dir / "enrichment.json"), enrichment.dump(1) + "\n");
  log("attention " + to_string(scale) + ": " + std::to_string(ranked.size()) + " patches ranked");
}

void stage_report(StageRun& run, const PipelineConfig& c) {
  const auto& L = run.layout();
  std::map<std::string, std::vector<MaeRow>> mae;
  for (const auto scale : c.scales) mae[to_string(scale)] = read_mae(run.require(L.age(scale) / "mae.csv"));
  const auto accuracy = read_csv(run.require(L.epi() / "classify" / "accuracy.csv"));
  const auto hr = read_csv(run.require(L.epi() / "survive" / "hazard_ratios.csv"));

  const auto dir = run.own(L.report());
  const auto t1 = age_table(mae);
  const auto t2 = disease_table(accuracy, "cv_accuracy");
  const auto t2_in = disease_table(accuracy, "in_sample_accuracy");
  const auto t3 = hazard_table(hr);
  write_csv(run.output(dir / "table1.csv"), t1);
  write_text(run.output(dir / "table1.md"), markdown_table(t1, "Mean absolute error of predicted age"));
  write_csv(run.output(dir / "table2.csv"), t2);
  write_text(run.output(dir / "table2.md"),
             markdown_table(t2, "Prevalent disease classification accuracy (" + std::to_string(c.epi_folds) +
                                    "-fold cross-validated)") +
                 "\n" + markdown_table(t2_in, "Prevalent disease classification accuracy (in-sample)"));
  write_csv(run.output(dir / "table2_in_sample.csv"), t2_in);
  write_csv(run.output(dir / "hazard_ratios.csv"), t3);
  write_text(run.output(dir / "hazard_ratios.md"), markdown_table(t3, "Hazard ratios, actual vs predicted"));
  std::string summary = "# Report\n\n" + markdown_table(t1, "Mean absolute error of predicted age") + "\n" +
                        markdown_table(t2, "Prevalent disease classification accuracy") + "\n" +
                        markdown_table(t3, "Hazard ratios, actual vs predicted") + "\n";

  std::string warnings;
  for (const auto scale : c.trained_scales()) {
    const auto train = json::parse(read_text(run.require(L.model(scale) / "train.json")));
    for (const auto& w : train.at("warnings")) warnings += "- " + to_string(scale) + ": " + w.get<std::string>() + "\n";
  }
  if (!warnings.empty()) summary += "## Training warnings\n\n" + warnings + "\n";

  if (c.report_curves) {
    const auto curves = read_csv(run.require(L.epi() / "survive" / "curves.csv"));
    write_csv(run.output(dir / "curves.csv"), curves);
    write_text(run.output(dir / "curves.svg"), survival_svg(curves));
    summary += "Survival curves: curves.svg (data in curves.csv).\n\n";
  }
  if (c.report_montage) {
    const auto scale = patch_scale(c);
    const auto top = read_csv(run.require(L.attention() / "top.csv"));
    const auto index = read_tile_index(run.require(L.tiles(scale) / "index.csv"));
    const auto store = run.require(L.tiles(scale) / "patches.bin");
    if (top.rows.empty()) throw ContractError("report: no attention patches for the montage");
    std::map<std::string, long> slot;
    for (const auto& r : index) slot[r.patch_id] = r.store_index;
    const auto cp = top.column("patch_id"), cs = top.column("slide_id"), ca = top.column("actual_age"),
               cpr = top.column("predicted_age"), ce = top.column("error"), cr = top.column("region"),
               crank = top.column("rank"), cepi = top.column("epidermis_fraction");
    const auto [rows, cols] = montage_grid(top.rows.size(), c.montage_rows, c.montage_cols);
    const std::size_t n = std::min<std::size_t>(top.rows.size(), static_cast<std::size_t>(rows) * cols);
    std::vector<MontageCell> cells;
    json meta = {{"rows", rows}, {"cols", cols}, {"scale", to_string(scale)}, {"cells", json::array()}};
    for (std::size_t i = 0; i < n; ++i) {
      const auto& r = top.rows[i];
      MontageCell cell;
      cell.image = read_patch(store, static_cast<std::size_t>(slot.at(r[cp])));
      cell.lines = {"#" + r[crank] + " " + r[cs], "AGE " + format_fixed(parse_double(r[ca]), 1) + " PRED " +
                                                     format_fixed(parse_double(r[cpr]), 1)};
      if (r[cr] != "n/a") cell.lines.push_back(r[cr]);
      cells.push_back(std::move(cell));
      meta["cells"].push_back({{"position", i},
                               {"rank", parse_int(r[crank])},
                               {"patch_id", r[cp]},
                               {"slide_id", r[cs]},
                               {"actual_age", parse_double(r[ca])},
                               {"predicted_age", parse_double(r[cpr])},
                               {"error", parse_double(r[ce])},
                               {"region", r[cr]},
                               {"epidermis_fraction", r[cepi].empty() ? json(nullptr) : json(parse_double(r[cepi]))}});
    }
    meta["enrichment"] = json::parse(read_text(run.require(L.attention() / "enrichment.json")));
    write_png(run.output(dir / "montage.png"), render_montage(cells, c.montage_rows, c.montage_cols));
    write_text(run.output(dir / "montage.json"), meta.dump(1) + "\n");
    summary += "Attention montage: montage.png (cell metadata in montage.json).\n";
  }
  write_text(run.output(dir / "report.md"), summary);
  log("report: " + dir.generic_string());
}

}  // namespace

StageRecord run_stage(const std::string& stage, const PipelineConfig& config) {
  config.validate();
  StageRun run(stage, config);
  if (stage == "synth")
    stage_synth(run, config);
  else if (stage == "tile")
    stage_tile(run, config);
  else if (stage == "pretrain")
    stage_pretrain(run, config);
  else if (stage == "embed")
    stage_embed(run, config);
  else if (stage == "cluster")
    stage_cluster(run, config);
  else if (stage == "predict-age")
    stage_predict_age(run, config);
  else if (stage == "classify")
    stage_classify(run, config);
  else if (stage == "survive")
    stage_survive(run, config);
  else if (stage == "attention")
    stage_attention(run, config);
  else if (stage == "report")
    stage_report(run, config);
  else
    throw ContractError("unknown stage '" + stage + "'");
  return run.finish();
}

std::vector<StageRecord> run_all(const PipelineConfig& config) {
  std::vector<StageRecord> out;
  for (const auto& stage : stage_names()) {
    if (stage == "synth" && !config.synth_enabled) continue;
    out.push_back(run_stage(stage, config));
  }
  return out;
}

}  // namespace histoage
