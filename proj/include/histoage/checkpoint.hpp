// Copyright 2026 The HistoAge Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "histoage/autodiff.hpp"

namespace histoage {

/// Named float32 tensors plus free-form metadata.
///
/// On-disk layout (all integers little-endian):
///   4 bytes   magic, "CDL1" for model checkpoints
///   u32       manifest length L
///   L bytes   UTF-8 JSON: {"meta": {...}, "tensors": [{"name", "kind", "shape",
///             "offset", "count"}, ...]}; offsets are bytes into the payload
///   payload   float32 values, tensors back to back in manifest order
/// Saving then loading reproduces every value bit for bit.
struct TensorArchive {
  struct Entry {
    std::string name;
    std::string kind;  // "param" or "buffer" for checkpoints; free-form otherwise
    Tensor value;
  };
  nlohmann::json meta = nlohmann::json::object();
  std::vector<Entry> entries;

  const Entry& find(const std::string& name) const;
};

inline constexpr std::array<char, 4> kCheckpointMagic{'C', 'D', 'L', '1'};
inline constexpr std::array<char, 4> kEmbeddingMagic{'E', 'M', 'B', '1'};

std::vector<std::uint8_t> encode_archive(const TensorArchive& archive, std::array<char, 4> magic);
TensorArchive decode_archive(const std::vector<std::uint8_t>& bytes, std::array<char, 4> magic);

void save_archive(const std::filesystem::path& path, const TensorArchive& archive,
                  std::array<char, 4> magic = kCheckpointMagic);
TensorArchive load_archive(const std::filesystem::path& path,
                           std::array<char, 4> magic = kCheckpointMagic);

/// Parameters as kind "param", buffers as kind "buffer".
TensorArchive archive_from_store(const ad::ParameterStore<float>& store, nlohmann::json meta);
/// Overwrites the values of an already-constructed store; names and shapes
/// must match exactly.
void restore_store(const TensorArchive& archive, ad::ParameterStore<float>& store);

}  // namespace histoage
