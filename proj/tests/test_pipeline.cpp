// Copyright 2026 The HistoAge Authors.
// SPDX-License-Identifier: Apache-2.0

#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sys/wait.h>

#include <json.hpp>

#include "histoage/config.hpp"
#include "histoage/epi.hpp"
#include "histoage/error.hpp"
#include "histoage/io.hpp"
#include "histoage/pipeline.hpp"
#include "histoage/report.hpp"

using namespace histoage;
namespace fs = std::filesystem;

namespace {

struct CommandResult {
  int code = -1;
  std::string output;
};

CommandResult run_cli(const std::string& args) {
  const std::string cmd = std::string(HISTOAGE_CLI) + " " + args + " 2>&1";
  CommandResult r;
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  char buf[4096];
  while (std::fgets(buf, sizeof buf, pipe)) r.output += buf;
  const int status = pclose(pipe);
  r.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::map<std::string, std::string> tiny_keys(const fs::path& root) {
  return {{"seed", "3"},
          {"paths.slides", (root / "data/slides").string()},
          {"paths.cohort", (root / "data/cohort.csv").string()},
          {"paths.truth", (root / "data/truth").string()},
          {"paths.work", (root / "work").string()},
          {"synth.enabled", "true"},
          {"synth.scale_factor", "0.01"},
          {"synth.slide_side", "256"},
          {"cdl.widths", "4,4,4"},
          {"cdl.depths", "1,1,1"},
          {"cdl.embed_dim.S1", "8"},
          {"cdl.embed_dim.S2", "8"},
          {"cdl.epochs", "1"},
          {"cdl.batch_size", "8"},
          {"gbt.bootstraps", "5"},
          {"gbt.trees", "10"}};
}

}  // namespace

TEST_SUITE("pipeline") {

TEST_CASE("key-value parsing") {
  const auto kv = parse_key_values("# comment\nseed = 5\n\n  gbt.trees=7 # trailing\nseed = 6\n");
  CHECK(kv.at("seed") == "6");
  CHECK(kv.at("gbt.trees") == "7");
  CHECK(kv.size() == 2);
}

TEST_CASE("config validation names the field") {
  auto expect_field = [](std::map<std::string, std::string> kv, const std::string& field) {
    try {
      config_from_key_values(kv);
      FAIL("accepted " << field);
    } catch (const ConfigError& e) {
      CHECK(e.field() == field);
    }
  };
  expect_field({{"no.such.key", "1"}}, "no.such.key");
  expect_field({{"gbt.trees", "many"}}, "gbt.trees");
  expect_field({{"cdl.batch_size", "1"}}, "cdl.batch_size");
  expect_field({{"scales", "S1,S9"}}, "scales");
  expect_field({{"augment.p", "1.5"}}, "augment.p");
  expect_field({{"epi.disease_mode", "maybe"}}, "epi.disease_mode");

  const auto c = config_from_key_values({{"seed", "18446744073709551615"}, {"gbt.bootstraps", "50"}, {"augment.p", "0.5"}});
  CHECK(c.seed == 18446744073709551615ULL);
  CHECK(c.bootstrap.members == 50);
  CHECK(c.augment.v2.p_saturation == 0.5);
  CHECK(c.augment.p_crop == 0.5);
}

TEST_CASE("config hash is canonical") {
  const auto a = config_from_key_values({{"seed", "1"}, {"gbt.trees", "20"}});
  const auto b = config_from_key_values({{"gbt.trees", "20"}, {"seed", "1"}});
  const auto c = config_from_key_values({{"seed", "2"}, {"gbt.trees", "20"}});
  CHECK(a.hash() == b.hash());
  CHECK(a.hash() != c.hash());
  CHECK(a.hash().size() == 64);
  const auto text = a.canonical();
  std::vector<std::string> keys;
  std::size_t pos = 0;
  while (pos < text.size()) {
    const auto end = text.find('\n', pos);
    const auto line = text.substr(pos, end - pos);
    keys.push_back(line.substr(0, line.find('=')));
    pos = end + 1;
  }
  CHECK(std::is_sorted(keys.begin(), keys.end()));
}

TEST_CASE("cli exit codes") {
  const auto dir = fs::temp_directory_path() / "histoage_cli_test";
  fs::remove_all(dir);
  fs::create_directories(dir);
  Subject s;
  s.pid = "P1";
  s.biopsy_date = "2010-01-01";
  write_cohort(dir / "cohort.csv", std::vector<Subject>{s});
  const auto no_cohort = run_cli("predict-age -s paths.work=" + (dir / "work").string() +
                                 " paths.cohort=" + (dir / "none.csv").string());
  CHECK(no_cohort.code == 2);
  CHECK(no_cohort.output.find("none.csv") != std::string::npos);
  const auto missing = run_cli("predict-age -s paths.work=" + (dir / "work").string() +
                               " paths.cohort=" + (dir / "cohort.csv").string());
  CHECK(missing.code == 2);
  CHECK(missing.output.find("slide_features.csv") != std::string::npos);
  const auto bad = run_cli("tile -s bogus.key=1");
  CHECK(bad.code == 3);
  CHECK(bad.output.find("bogus.key") != std::string::npos);
  const auto value = run_cli("tile -s gbt.depth=0");
  CHECK(value.code == 3);
  CHECK(value.output.find("gbt.depth") != std::string::npos);
  CHECK(run_cli("no-such-stage").code == 3);
  const auto show = run_cli("show-config -s seed=4");
  CHECK(show.code == 0);
  CHECK(show.output.find("seed=4") != std::string::npos);
  fs::remove_all(dir);
}

TEST_CASE("patch store and tile index round trip") {
  const auto dir = fs::temp_directory_path() / "histoage_store_test";
  fs::create_directories(dir);
  std::vector<Image8> patches;
  for (int i = 0; i < 3; ++i) {
    Image8 p(16, 16, 3);
    for (std::size_t k = 0; k < p.pixels.size(); ++k) p.pixels[k] = static_cast<std::uint8_t>(k * (i + 1));
    patches.push_back(p);
  }
  write_patch_store(dir / "a.bin", patches);
  const auto back = read_patch_store(dir / "a.bin");
  REQUIRE(back.size() == 3);
  for (int i = 0; i < 3; ++i) CHECK(back[i].pixels == patches[i].pixels);
  CHECK(read_patch(dir / "a.bin", 2).pixels == patches[2].pixels);
  CHECK_THROWS(read_patch(dir / "a.bin", 3));
  {
    PatchStoreWriter w(dir / "b.bin");
    for (const auto& p : patches) w.append(p);
    CHECK(w.count() == 3);
    w.close();
  }
  CHECK(slurp(dir / "a.bin") == slurp(dir / "b.bin"));

  std::vector<TileRow> rows{{"W1", "W1_S1_0_0", 0, 0, 512, ScaleTag::kS1, true, 0},
                            {"W1", "W1_S1_462_0", 462, 0, 512, ScaleTag::kS1, false, -1},
                            {"W2", "W2_S1_0_0", 0, 0, 512, ScaleTag::kS1, true, 1}};
  write_tile_index(dir / "index.csv", rows);
  const auto idx = read_tile_index(dir / "index.csv");
  REQUIRE(idx.size() == 3);
  CHECK(idx[1].origin_x == 462);
  CHECK_FALSE(idx[1].foreground);
  CHECK(idx[1].store_index == -1);
  CHECK(idx[2].store_index == 1);
  fs::remove_all(dir);
}

TEST_CASE("montage layout") {
  CHECK(montage_grid(8, 2, 4) == std::pair{2, 4});
  CHECK(montage_grid(1, 2, 4) == std::pair{1, 1});
  CHECK(montage_grid(3, 2, 4) == std::pair{1, 3});
  CHECK(montage_grid(5, 2, 4) == std::pair{2, 4});

  std::vector<MontageCell> cells;
  for (int i = 0; i < 8; ++i) {
    MontageCell c{Image8(20, 20, 3, static_cast<std::uint8_t>(10 * i + 5)), {"ACT 40", "PRED 42"}};
    cells.push_back(c);
  }
  const auto img = render_montage(cells, 2, 4);
  CHECK(img.width == 4 * 28 + 8);
  const int row_h = (img.height - 8) / 2;
  for (int i = 0; i < 8; ++i) {
    const int gx = 8 + (i % 4) * 28, gy = 8 + (i / 4) * row_h;
    CHECK(img.at(gx + 10, gy + 10)[0] == 10 * i + 5);
  }
  const auto one = render_montage({cells[3]}, 2, 4);
  CHECK(one.width == 28 + 8);
  CHECK(one.at(18, 18)[0] == 35);
  CHECK(text_width("AB") > text_width("A"));
}

TEST_CASE("table shapes") {
  CHECK(format_estimate(2.2, 1.7, 2.9) == "2.20 (1.70 - 2.90)");
  CHECK(format_estimate(std::nan(""), 0, 0) == "n/a");

  std::vector<MaeRow> rows;
  for (int sex : {0, 1})
    for (const auto& b : table_age_bins()) rows.push_back({sex, b.label, 3, 5.0, 4.0, 6.0});
  const auto t1 = age_table({{"S1", rows}, {"S3", rows}});
  CHECK(t1.header == std::vector<std::string>{"sex", "age_group", "participants", "MAE S1", "MAE S3"});
  REQUIRE(t1.rows.size() == 16);
  CHECK(t1.rows[0][0] == "Males");
  CHECK(t1.rows[8][0] == "Females");
  CHECK(t1.rows[7][1] == "All ages");
  CHECK(t1.rows[0][3] == "5.00 (4.00 - 6.00)");

  CsvTable acc;
  acc.header = {"sex", "disease", "source", "cv_accuracy", "in_sample_accuracy", "skipped"};
  for (const char* sex : {"M", "F"})
    for (const auto d : kDiseases)
      for (const char* src : {"actual", "predicted", "combined"})
        acc.rows.push_back({sex, display_name(d), src, "0.625", "0.7", ""});
  const auto t2 = disease_table(acc);
  CHECK(t2.header.size() == 7);
  CHECK(t2.header[0] == "Disease");
  CHECK(t2.rows.size() == 7);
  CHECK(t2.rows[0][0] == "Heart Disease");
  CHECK(markdown_table(t2).find("| Disease |") != std::string::npos);
}

TEST_CASE("tiny end-to-end run: manifests, idempotent stages, missing inputs") {
  const auto root = fs::temp_directory_path() / "histoage_pipeline_test";
  fs::remove_all(root);
  const auto config = config_from_key_values(tiny_keys(root));
  const auto records = run_all(config);
  CHECK(records.size() == stage_names().size());
  const WorkLayout work{root / "work"};
  for (const auto& stage : stage_names()) {
    const auto manifest = nlohmann::json::parse(slurp(work.manifests() / (stage + ".json")));
    CHECK(manifest.at("stage") == stage);
    CHECK(manifest.at("config_hash") == config.hash());
    CHECK_FALSE(manifest.at("outputs").empty());
    for (const auto& o : manifest.at("outputs")) CHECK(o.at("sha256").get<std::string>().size() == 64);
  }
  for (const char* f : {"table1.csv", "table2.csv", "hazard_ratios.csv", "curves.svg", "montage.png", "report.md"})
    CHECK(fs::exists(work.report() / f));

  const auto before = slurp(work.features(ScaleTag::kS1) / "slide_features.csv");
  const auto age_before = slurp(work.age(ScaleTag::kS1) / "predictions.csv");
  run_stage("cluster", config);
  run_stage("predict-age", config);
  CHECK(slurp(work.features(ScaleTag::kS1) / "slide_features.csv") == before);
  CHECK(slurp(work.age(ScaleTag::kS1) / "predictions.csv") == age_before);

  // A stray file in a stage-owned directory is cleared on rerun.
  write_text(work.age(ScaleTag::kS1) / "stray.txt", "x");
  run_stage("predict-age", config);
  CHECK_FALSE(fs::exists(work.age(ScaleTag::kS1) / "stray.txt"));

  fs::remove_all(work.embeddings(ScaleTag::kS2));
  try {
    run_stage("cluster", config);
    FAIL("cluster ran without S2 embeddings");
  } catch (const MissingArtifactError& e) {
    CHECK(e.path().find("embeddings") != std::string::npos);
  }
  fs::remove_all(root);
}

}  // TEST_SUITE
