#pragma once

// Mini-batch Adam training of the hybrid model with a subject-wise
// validation split.

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "nflr/hybrid.hpp"

namespace nflr {

struct TrainConfig {
    std::size_t batch_size = 64;
    std::size_t epochs = 300;
    AdamConfig adam;
    double validation_split = 0.2;
    // Worker threads for per-sample gradients. Reduction order is fixed, so
    // results do not depend on this value.
    std::size_t threads = 1;

    void validate() const;
};

struct TrainSample {
    Example example;
    std::string subject;
};

struct EpochStats {
    std::size_t epoch = 0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    double train_acc = 0.0;
    double val_acc = 0.0;
};

struct TrainResult {
    HybridModel model;
    std::vector<EpochStats> history;
    std::vector<std::string> validation_subjects;
};

// Channel statistics over non-empty cells and scalar statistics, both from
// the listed samples only. Zero SDs are replaced by one.
Standardizer fit_standardizer(const ModelConfig& cfg, std::span<const TrainSample> samples,
                              std::span<const std::size_t> indices);

TrainResult train(const ModelConfig& model_cfg, const TrainConfig& train_cfg, std::span<const TrainSample> samples,
                  std::uint64_t seed);

// Mean loss and accuracy (threshold 0.5) over the listed samples.
std::pair<double, double> evaluate_loss(const HybridModel& model, std::span<const TrainSample> samples,
                                        std::span<const std::size_t> indices);

std::string history_to_csv(const std::vector<EpochStats>& history);

}  // namespace nflr
