// Copyright 2026 The HistoAge Authors.
// SPDX-License-Identifier: Apache-2.0

#include "histoage/checkpoint.hpp"

#include <bit>
#include <cstring>

#include "histoage/io.hpp"

namespace histoage {

static_assert(std::endian::native == std::endian::little,
              "archive encoding assumes a little-endian host");

const TensorArchive::Entry& TensorArchive::find(const std::string& name) const {
  for (const auto& e : entries)
    if (e.name == name) return e;
  throw ContractError("archive has no tensor named " + name);
}

std::vector<std::uint8_t> encode_archive(const TensorArchive& archive, std::array<char, 4> magic) {
  nlohmann::json manifest;
  manifest["meta"] = archive.meta;
  manifest["tensors"] = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& e : archive.entries) {
    manifest["tensors"].push_back({{"name", e.name},
                                   {"kind", e.kind},
                                   {"shape", e.value.shape()},
                                   {"offset", offset},
                                   {"count", e.value.size()}});
    offset += e.value.size() * sizeof(float);
  }
  const std::string text = manifest.dump();
  std::vector<std::uint8_t> out(magic.begin(), magic.end());
  const auto len = static_cast<std::uint32_t>(text.size());
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(len >> (8 * i)));
  out.insert(out.end(), text.begin(), text.end());
  const std::size_t payload_start = out.size();
  out.resize(payload_start + offset);
  std::size_t pos = payload_start;
  for (const auto& e : archive.entries) {
    std::memcpy(out.data() + pos, e.value.data().data(), e.value.size() * sizeof(float));
    pos += e.value.size() * sizeof(float);
  }
  return out;
}

TensorArchive decode_archive(const std::vector<std::uint8_t>& bytes, std::array<char, 4> magic) {
  if (bytes.size() < 8 || !std::equal(magic.begin(), magic.end(), bytes.begin()))
    throw ContractError("archive: bad magic, expected " + std::string(magic.begin(), magic.end()));
  std::uint32_t len = 0;
  for (int i = 0; i < 4; ++i) len |= static_cast<std::uint32_t>(bytes[4 + i]) << (8 * i);
  if (8 + static_cast<std::size_t>(len) > bytes.size()) throw ContractError("archive: truncated manifest");
  const auto manifest = nlohmann::json::parse(bytes.begin() + 8, bytes.begin() + 8 + len);
  const std::size_t payload = 8 + len;
  TensorArchive archive;
  archive.meta = manifest.at("meta");
  for (const auto& t : manifest.at("tensors")) {
    const auto shape = t.at("shape").get<Shape>();
    const auto offset = t.at("offset").get<std::size_t>();
    const auto count = t.at("count").get<std::size_t>();
    if (count != shape_size(shape)) throw ContractError("archive: count/shape mismatch");
    if (payload + offset + count * sizeof(float) > bytes.size())
      throw ContractError("archive: truncated payload");
    std::vector<float> values(count);
    std::memcpy(values.data(), bytes.data() + payload + offset, count * sizeof(float));
    archive.entries.push_back({t.at("name").get<std::string>(), t.at("kind").get<std::string>(),
                               Tensor(shape, std::move(values))});
  }
  return archive;
}

void save_archive(const std::filesystem::path& path, const TensorArchive& archive,
                  std::array<char, 4> magic) {
  write_bytes(path, encode_archive(archive, magic));
}

TensorArchive load_archive(const std::filesystem::path& path, std::array<char, 4> magic) {
  return decode_archive(read_bytes(path), magic);
}

TensorArchive archive_from_store(const ad::ParameterStore<float>& store, nlohmann::json meta) {
  TensorArchive archive;
  archive.meta = std::move(meta);
  for (const auto& p : store.parameters()) archive.entries.push_back({p.name, "param", p.value});
  for (const auto& b : store.buffers()) archive.entries.push_back({b.name, "buffer", b.value});
  return archive;
}

void restore_store(const TensorArchive& archive, ad::ParameterStore<float>& store) {
  auto assign = [&archive](ad::Parameter<float>& slot, const char* kind) {
    const auto& e = archive.find(slot.name);
    if (e.kind != kind) throw ContractError("archive: " + slot.name + " has kind " + e.kind);
    if (e.value.shape() != slot.value.shape())
      throw ShapeError("archive: " + slot.name + " shape " + shape_str(e.value.shape()) +
                       " vs model " + shape_str(slot.value.shape()));
    slot.value = e.value;
  };
  for (auto& p : store.parameters()) assign(p, "param");
  for (auto& b : store.buffers()) assign(b, "buffer");
  if (archive.entries.size() != store.parameters().size() + store.buffers().size())
    throw ContractError("archive: tensor count does not match model");
}

}  // namespace histoage
