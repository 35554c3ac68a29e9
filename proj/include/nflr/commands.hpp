#pragma once

// Command implementations behind the nflr executable. Each throws
// nflr::Error on failure; the caller maps error kinds to exit codes.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "nflr/config.hpp"

namespace nflr {

struct GlobalOptions {
    std::optional<std::filesystem::path> config;
    std::optional<std::uint64_t> seed;
    std::filesystem::path out;
    bool force = false;
    std::optional<std::size_t> threads;
};

// Config for commands that operate on an existing bundle: --config if
// given, else the config recorded in the bundle; --seed overrides.
RunConfig resolve_config(const GlobalOptions& opts, const std::optional<std::filesystem::path>& bundle_dir);

inline const std::vector<std::string> model_variants{"hybrid-2ch", "hybrid-1ch", "logit-a", "logit-b"};

void cmd_gen(const GlobalOptions& opts);

void cmd_maps(const GlobalOptions& opts, const std::filesystem::path& bundle_dir);

struct TrainOptions {
    std::string variant;
    // Every file read during training is appended here when set.
    std::vector<std::filesystem::path>* read_audit = nullptr;
};

// Writes <out>/<variant>/.
void cmd_train(const GlobalOptions& opts, const std::filesystem::path& bundle_dir, const TrainOptions& topts);

// Each model is a directory written by cmd_train. With no models listed,
// the variants present under --out are used.
void cmd_eval(const GlobalOptions& opts, const std::filesystem::path& bundle_dir,
              std::vector<std::filesystem::path> models);

// Writes <run_dir>/report.md.
void cmd_report(const std::filesystem::path& run_dir);

}  // namespace nflr
