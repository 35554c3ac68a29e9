#pragma once

// Run configuration: one JSON document covering the cohort, phenotype,
// phantom, map pipeline, model, training, logistic and evaluation options.
// Unknown keys are rejected; missing keys take their defaults.

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>

#include "json.hpp"
#include "nflr/hybrid.hpp"
#include "nflr/logistic.hpp"
#include "nflr/phantom.hpp"
#include "nflr/polar_map.hpp"
#include "nflr/train.hpp"

namespace nflr {

struct EvaluationConfig {
    double train_fraction = 0.8;
    // Defaults to the run seed.
    std::optional<std::uint64_t> split_seed;
    double threshold = 0.5;
    // "scan" or "eye" (mean score over an eye's repeat scans).
    std::string unit = "scan";

    void validate() const;
};

struct RunConfig {
    std::uint64_t seed = 1729;
    CohortSpec cohort;
    PhenotypeSpec phenotype = PhenotypeSpec::defaults();
    PhantomParams phantom;
    MapGeometry maps;
    ModelConfig model;
    // False when model.cnn_channels_in is left to the trained variant
    // (null in JSON).
    bool channels_explicit = false;
    TrainConfig train;
    LogisticConfig logistic;
    EvaluationConfig evaluation;

    std::uint64_t split_seed() const { return evaluation.split_seed.value_or(seed); }
    void validate() const;
};

nlohmann::ordered_json to_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

nlohmann::ordered_json to_json(const RunConfig& cfg);
// Starts from the defaults and applies every key in j.
RunConfig run_config_from_json(const nlohmann::json& j);
RunConfig load_run_config(const std::filesystem::path& path);

}  // namespace nflr
