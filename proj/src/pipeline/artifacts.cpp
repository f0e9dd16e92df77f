// Copyright 2026 The HistoAge Authors.
// SPDX-License-Identifier: Apache-2.0

#include <cstring>
#include <fstream>

#include "histoage/error.hpp"
#include "histoage/io.hpp"
#include "histoage/pipeline.hpp"

namespace histoage {

namespace {

constexpr char kStoreMagic[4] = {'H', 'P', 'S', '1'};
constexpr std::size_t kHeader = 12;

void put_u32(std::ostream& out, std::uint32_t v) {
  const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                              static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
  out.write(reinterpret_cast<const char*>(b), 4);
}

std::uint32_t get_u32(const unsigned char* b) {
  return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
         (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

struct StoreHeader {
  std::uint32_t count;
  std::uint32_t side;
};

StoreHeader read_header(std::ifstream& in, const std::filesystem::path& path) {
  unsigned char h[kHeader];
  if (!in.read(reinterpret_cast<char*>(h), kHeader) || std::memcmp(h, kStoreMagic, 4) != 0)
    throw ContractError("not a patch store: " + path.string());
  return {get_u32(h + 4), get_u32(h + 8)};
}

}  // namespace

void write_patch_store(const std::filesystem::path& path, const std::vector<Image8>& patches) {
  std::uint32_t side = patches.empty() ? 0 : static_cast<std::uint32_t>(patches.front().width);
  for (const auto& p : patches)
    if (p.width != static_cast<int>(side) || p.height != static_cast<int>(side) || p.channels != 3)
      throw ShapeError("write_patch_store: patches must be equal RGB squares");
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out.write(kStoreMagic, 4);
  put_u32(out, static_cast<std::uint32_t>(patches.size()));
  put_u32(out, side);
  for (const auto& p : patches) out.write(reinterpret_cast<const char*>(p.pixels.data()), p.pixels.size());
  if (!out) throw Error("short write to " + path.string());
}

PatchStoreWriter::PatchStoreWriter(const std::filesystem::path& path) : path_(path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  out_ = std::make_unique<std::ofstream>(path, std::ios::binary | std::ios::trunc);
  if (!*out_) throw Error("cannot write " + path.string());
  out_->write(kStoreMagic, 4);
  put_u32(*out_, 0);
  put_u32(*out_, 0);
}

void PatchStoreWriter::append(const Image8& patch) {
  if (!out_) throw ContractError("patch store already closed");
  if (count_ == 0) side_ = patch.width;
  if (patch.width != side_ || patch.height != side_ || patch.channels != 3)
    throw ShapeError("patch store: patches must be equal RGB squares");
  out_->write(reinterpret_cast<const char*>(patch.pixels.data()), static_cast<std::streamsize>(patch.pixels.size()));
  ++count_;
}

void PatchStoreWriter::close() {
  if (!out_) return;
  out_->seekp(4);
  put_u32(*out_, static_cast<std::uint32_t>(count_));
  put_u32(*out_, static_cast<std::uint32_t>(side_));
  out_->close();
  if (!*out_) throw Error("short write to " + path_.string());
  out_.reset();
}

std::vector<Image8> read_patch_store(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError(path.string());
  const auto h = read_header(in, path);
  std::vector<Image8> out;
  out.reserve(h.count);
  for (std::uint32_t i = 0; i < h.count; ++i) {
    Image8 img(static_cast<int>(h.side), static_cast<int>(h.side), 3);
    if (!in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size())))
      throw ContractError("truncated patch store: " + path.string());
    out.push_back(std::move(img));
  }
  return out;
}

Image8 read_patch(const std::filesystem::path& path, std::size_t index) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw MissingArtifactError(path.string());
  const auto h = read_header(in, path);
  if (index >= h.count) throw ContractError("patch index out of range in " + path.string());
  Image8 img(static_cast<int>(h.side), static_cast<int>(h.side), 3);
  in.seekg(static_cast<std::streamoff>(kHeader + index * img.pixels.size()));
  if (!in.read(reinterpret_cast<char*>(img.pixels.data()), static_cast<std::streamsize>(img.pixels.size())))
    throw ContractError("truncated patch store: " + path.string());
  return img;
}

void write_tile_index(const std::filesystem::path& path, const std::vector<TileRow>& rows) {
  CsvTable t;
  t.header = {"slide_id", "patch_id", "origin_x", "origin_y", "side_px", "scale_tag", "foreground"};
  for (const auto& r : rows)
    t.rows.push_back({r.slide_id, r.patch_id, std::to_string(r.origin_x), std::to_string(r.origin_y),
                      std::to_string(r.side_px), to_string(r.scale), r.foreground ? "1" : "0"});
  write_csv(path, t);
}

std::vector<TileRow> read_tile_index(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw MissingArtifactError(path.string());
  const auto t = read_csv(path);
  const auto cs = t.column("slide_id"), cp = t.column("patch_id"), cx = t.column("origin_x"),
             cy = t.column("origin_y"), cside = t.column("side_px"), ctag = t.column("scale_tag"),
             cfg = t.column("foreground");
  std::vector<TileRow> out;
  long next = 0;
  for (const auto& r : t.rows) {
    TileRow row;
    row.slide_id = r[cs];
    row.patch_id = r[cp];
    row.origin_x = static_cast<int>(parse_int(r[cx]));
    row.origin_y = static_cast<int>(parse_int(r[cy]));
    row.side_px = static_cast<int>(parse_int(r[cside]));
    row.scale = parse_scale_tag(r[ctag]);
    row.foreground = r[cfg] == "1";
    row.store_index = row.foreground ? next++ : -1;
    out.push_back(std::move(row));
  }
  return out;
}

}  // namespace histoage
