#pragma once

// Cohort bundle on disk:
//   manifest.json   format version, seed, generator config, scan index with
//                   array references and SHA-256 digests, ground truth
//   records.csv     one clinical record per scan
//   arrays/*.f32    raw little-endian float32, row-major
//   config.json     echoed run configuration

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "nflr/phantom.hpp"

namespace nflr {

inline constexpr const char* bundle_format = "nflr-bundle/1";

struct ArrayRef {
    std::string path;  // relative to the bundle directory
    std::vector<std::size_t> dims;
    std::string sha256;

    std::size_t element_count() const;
};

nlohmann::ordered_json to_json(const ArrayRef& a);
ArrayRef array_ref_from_json(const nlohmann::json& j);

// Writes values as float32 and returns the reference with its digest.
ArrayRef write_array(const std::filesystem::path& bundle_dir, const std::string& rel_path,
                     std::vector<std::size_t> dims, std::span<const double> values);
// Verifies byte length and digest before decoding.
std::vector<double> read_array(const std::filesystem::path& bundle_dir, const ArrayRef& ref);

// One records.csv row: the clinical record plus map-derived columns.
struct RecordRow {
    std::string scan_id;
    EyeRecord record;
    std::optional<double> nflr_avg;
    std::optional<double> nflr_flv;
};

std::string records_to_csv(const std::vector<RecordRow>& rows);
std::vector<RecordRow> records_from_csv(const std::string& text);

struct ScanEntry {
    std::string scan_id;
    std::string subject_id;
    Eye eye = Eye::od;
    int scan_index = 0;
    Group group = Group::normal;
    std::pair<double, double> disc_offset{0.0, 0.0};
    std::map<std::string, ArrayRef> arrays;
};

struct Bundle {
    std::filesystem::path dir;
    nlohmann::ordered_json manifest;
    std::vector<ScanEntry> scans;  // manifest order
    std::vector<RecordRow> records;  // aligned with scans

    bool processed() const { return manifest.contains("processed"); }
    std::size_t index_of(const std::string& scan_id) const;
};

Bundle open_bundle(const std::filesystem::path& dir);

// Writes the manifest deterministically (two-space indent, trailing newline).
void write_manifest(const std::filesystem::path& dir, const nlohmann::ordered_json& manifest);

std::string format_double(double v);

}  // namespace nflr
