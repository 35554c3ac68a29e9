#pragma once

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace nflr {

static_assert(std::endian::native == std::endian::little,
              "raw array files are little-endian; add byte swapping for this platform");

// Raw little-endian IEEE-754 array files.
std::vector<std::uint8_t> encode_f32(std::span<const double> values);
std::vector<std::uint8_t> encode_f64(std::span<const double> values);
std::vector<double> decode_f32(std::span<const std::uint8_t> bytes);
std::vector<double> decode_f64(std::span<const std::uint8_t> bytes);

// When set, every read_file path is appended to *log (nullptr disables).
void set_read_audit(std::vector<std::filesystem::path>* log);

std::vector<std::uint8_t> read_file(const std::filesystem::path& path);
void write_file(const std::filesystem::path& path, std::span<const std::uint8_t> bytes);
void write_text(const std::filesystem::path& path, const std::string& text);
std::string read_text(const std::filesystem::path& path);

// Lower-case hex SHA-256 digest.
std::string sha256_hex(std::span<const std::uint8_t> bytes);

}  // namespace nflr
