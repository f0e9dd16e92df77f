// Copyright 2026 The HistoAge Authors.
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace histoage {

/// Shortest decimal that round-trips the value exactly. Output is identical
/// across runs, which the byte-identical artifact contract depends on.
std::string format_number(double value);
std::string format_number(float value);

/// Fixed-point formatting for human-facing tables.
std::string format_fixed(double value, int decimals);

/// Minimal CSV table: header plus string cells. Fields never contain commas
/// or quotes in this project's formats, so no quoting is performed.
struct CsvTable {
  std::vector<std::string> header;
  std::vector<std::vector<std::string>> rows;

  std::size_t column(std::string_view name) const;  // throws ContractError
};

CsvTable read_csv(const std::filesystem::path& path);
void write_csv(const std::filesystem::path& path, const CsvTable& table);
std::vector<std::string> split(std::string_view text, char sep);

double parse_double(std::string_view text);
long long parse_int(std::string_view text);

std::string read_text(const std::filesystem::path& path);
void write_text(const std::filesystem::path& path, std::string_view text);
std::vector<std::uint8_t> read_bytes(const std::filesystem::path& path);
void write_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

/// Lowercase hex SHA-256.
std::string sha256_hex(std::string_view bytes);
std::string sha256_file(const std::filesystem::path& path);

}  // namespace histoage
