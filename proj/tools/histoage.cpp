// Copyright 2026 The HistoAge Authors.
// SPDX-License-Identifier: Apache-2.0

// Pipeline driver: `histoage <stage> --config run.cfg [--set key=value ...]`.

#include <cstdio>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "histoage/config.hpp"
#include "histoage/error.hpp"
#include "histoage/pipeline.hpp"

namespace {

enum ExitCode { kOk = 0, kFailure = 1, kMissingArtifact = 2, kBadConfig = 3, kNumeric = 4 };

void print_record(const histoage::StageRecord& r) {
  std::printf("%-12s %4zu inputs %4zu outputs %9.2f s\n", r.stage.c_str(), r.inputs.size(), r.outputs.size(),
              r.seconds);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Biological age from skin histology: synthetic data, contrastive features, age and survival models"};
  app.require_subcommand(1);
  std::string config_path;
  std::vector<std::string> overrides;
  app.add_option("-c,--config", config_path, "key = value configuration file");
  app.add_option("-s,--set", overrides, "override one key, e.g. --set gbt.bootstraps=100")->take_all();

  std::vector<std::string> commands = histoage::stage_names();
  commands.push_back("run-all");
  commands.push_back("show-config");
  for (const auto& name : commands) {
    auto* sub = app.add_subcommand(name, name == "run-all"       ? "run every stage in order"
                                         : name == "show-config" ? "print the canonical configuration and its hash"
                                                                 : "run the " + name + " stage");
    sub->fallthrough();
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kBadConfig;
  }
  const std::string command = app.get_subcommands().front()->get_name();

  try {
    const auto config = histoage::load_config(config_path, overrides);
    if (command == "show-config") {
      std::printf("%s# hash %s\n", config.canonical().c_str(), config.hash().c_str());
    } else if (command == "run-all") {
      for (const auto& r : histoage::run_all(config)) print_record(r);
    } else {
      print_record(histoage::run_stage(command, config));
    }
    return kOk;
  } catch (const histoage::MissingArtifactError& e) {
    std::fprintf(stderr, "missing artifact: %s\n", e.path().c_str());
    return kMissingArtifact;
  } catch (const histoage::ConfigError& e) {
    std::fprintf(stderr, "bad config field: %s\n%s\n", e.field().c_str(), e.what());
    return kBadConfig;
  } catch (const histoage::NumericError& e) {
    std::fprintf(stderr, "numeric failure: %s\n", e.what());
    return kNumeric;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kFailure;
  }
}
