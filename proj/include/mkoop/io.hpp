#pragma once

// File helpers shared by the dataset, report and CLI code. Output is UTF-8
// with '\n' line endings; doubles use the shortest round-trip decimal form.

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

namespace mkoop::io {

std::string format_double(double v);

nlohmann::json read_json(const std::filesystem::path& path);
void write_json(const std::filesystem::path& path, const nlohmann::json& j);
void write_text(const std::filesystem::path& path, std::string_view text);

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};

CsvTable read_csv(const std::filesystem::path& path);
void write_csv(const std::filesystem::path& path, const CsvTable& table);
std::string csv_line(const std::vector<std::string>& fields);

/// 64-bit FNV-1a, rendered as 16 hex digits.
std::string fnv1a_hex(std::string_view data);
std::string json_hash(const nlohmann::json& j);

/// splitmix64; derives independent child seeds from a master seed.
std::uint64_t derive_seed(std::uint64_t master, std::uint64_t index);

}  // namespace mkoop::io
