#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace dcr {

/// Shortest decimal text that parses back to the same double.
std::string format_double(double value);
/// Whole-string parse; throws FormatError naming `what` on failure.
double parse_double(std::string_view text, std::string_view what);
std::uint64_t parse_u64(std::string_view text, std::string_view what);

/// Creates parent directories as needed; throws IoError.
void write_file(const std::filesystem::path& path, std::string_view content);
std::string read_file(const std::filesystem::path& path);

/// 64-bit FNV-1a, as 16 lowercase hex digits.
std::string fnv1a_hex(std::string_view text);

std::vector<std::string> split(std::string_view text, char sep);

} // namespace dcr
