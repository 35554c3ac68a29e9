#pragma once

// Subject-level splitting and diagnostic-accuracy statistics.

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace nflr {

enum class Fold { train, test };

struct SubjectRef {
    std::string id;
    int group = 0;  // stratum, 0 = normal, 1 = glaucoma
};

struct SplitAssignment {
    std::map<std::string, Fold> fold;
    double fraction = 0.8;
    std::uint64_t seed = 0;

    Fold of(const std::string& subject) const;
    std::size_t count(Fold f) const;
};

// Per stratum: seeded shuffle, first ceil(fraction * n) subjects to train.
// Subjects may repeat in the input (one entry per scan); they are deduplicated.
SplitAssignment subject_split(std::span<const SubjectRef> subjects, double fraction, std::uint64_t seed);

// Mann-Whitney estimate with ties counted as one half.
double auc(std::span<const double> scores, std::span<const int> labels);

struct RocResult {
    std::vector<double> thresholds;  // decreasing; first is +inf
    std::vector<double> fpr;
    std::vector<double> tpr;
    double auc = 0.0;
};

// Operating points at every distinct score (positive when score >= t),
// preceded by the all-negative point (0, 0).
RocResult roc_curve(std::span<const double> scores, std::span<const int> labels);

struct SensitivityResult {
    double sensitivity = 0.0;
    double threshold = 0.0;
    // Only the trivial all-negative point met the specificity floor.
    bool degenerate = false;
};

SensitivityResult sensitivity_at_specificity(std::span<const double> scores, std::span<const int> labels,
                                             double target_specificity);

struct Confusion {
    double accuracy = 0.0;
    double sensitivity = 0.0;
    double specificity = 0.0;
    std::size_t tp = 0, fp = 0, tn = 0, fn = 0;
};

Confusion confusion_at_threshold(std::span<const double> scores, std::span<const int> labels, double threshold);

struct ComparisonResult {
    double auc_a = 0.0;
    double auc_b = 0.0;
    double difference = 0.0;
    double variance = 0.0;
    double z = 0.0;
    double p_value = 1.0;
};

// Paired DeLong test of two correlated AUCs on the same samples.
ComparisonResult delong_test(std::span<const double> scores_a, std::span<const double> scores_b,
                             std::span<const int> labels);

double normal_two_sided_p(double z);

// Columns threshold, fpr, tpr, split_seed, unit.
std::string roc_to_csv(const RocResult& roc, std::uint64_t split_seed, const std::string& unit);

}  // namespace nflr
