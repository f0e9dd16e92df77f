// Copyright 2026 The HistoAge Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <memory>
#include <string>
#include <vector>

#include "histoage/config.hpp"
#include "histoage/image.hpp"
#include "histoage/tiler.hpp"

namespace histoage {

/// Pipeline order: synth, tile, pretrain, embed, cluster, predict-age,
/// classify, survive, attention, report.
const std::vector<std::string>& stage_names();

struct StageRecord {
  std::string stage;
  std::vector<std::string> inputs;   // as written in the manifest
  std::vector<std::string> outputs;
  double seconds = 0;
};

/// Runs one stage. Missing inputs throw MissingArtifactError; the stage
/// manifest lands in `<work>/manifests/<stage>.json` and the wall time in
/// `<work>/timings.json` (the only file allowed to differ between reruns).
StageRecord run_stage(const std::string& stage, const PipelineConfig& config);

/// Every stage in order; synth only when synth.enabled is set.
std::vector<StageRecord> run_all(const PipelineConfig& config);

// Artifacts shared between stages -------------------------------------------

/// Foreground patches of one scale as 8-bit RGB squares. File layout:
/// "HPS1", u32 count, u32 side, then count * side * side * 3 bytes.
void write_patch_store(const std::filesystem::path& path, const std::vector<Image8>& patches);
std::vector<Image8> read_patch_store(const std::filesystem::path& path);

/// Appends patches to a store without holding them all in memory.
class PatchStoreWriter {
 public:
  explicit PatchStoreWriter(const std::filesystem::path& path);
  void append(const Image8& patch);
  /// Writes the final count; the store is unreadable until then.
  void close();
  std::size_t count() const { return count_; }

 private:
  std::filesystem::path path_;
  std::unique_ptr<std::ofstream> out_;
  std::size_t count_ = 0;
  int side_ = 0;
};

/// Reads a single patch without loading the rest.
Image8 read_patch(const std::filesystem::path& path, std::size_t index);

/// Tile manifest rows; `store_index` is the row's position in the patch
/// store, or -1 for background patches.
struct TileRow {
  std::string slide_id;
  std::string patch_id;
  int origin_x = 0;
  int origin_y = 0;
  int side_px = 0;
  ScaleTag scale = ScaleTag::kS1;
  bool foreground = false;
  long store_index = -1;
};

/// CSV `slide_id,patch_id,origin_x,origin_y,side_px,scale_tag,foreground`.
void write_tile_index(const std::filesystem::path& path, const std::vector<TileRow>& rows);
std::vector<TileRow> read_tile_index(const std::filesystem::path& path);

/// Work-tree locations.
struct WorkLayout {
  std::filesystem::path root;

  std::filesystem::path tiles(ScaleTag s) const { return root / "tiles" / to_string(s); }
  std::filesystem::path model(ScaleTag s) const { return root / "models" / to_string(s); }
  std::filesystem::path embeddings(ScaleTag s) const { return root / "embeddings" / to_string(s); }
  std::filesystem::path features(ScaleTag s) const { return root / "features" / to_string(s); }
  std::filesystem::path age(ScaleTag s) const { return root / "age" / to_string(s); }
  std::filesystem::path epi() const { return root / "epi"; }
  std::filesystem::path attention() const { return root / "attention"; }
  std::filesystem::path report() const { return root / "report"; }
  std::filesystem::path manifests() const { return root / "manifests"; }
  std::filesystem::path timings() const { return root / "timings.json"; }
};

}  // namespace histoage
