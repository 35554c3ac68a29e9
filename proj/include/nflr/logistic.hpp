#pragma once

// Ridge-penalized logistic regression reference models.

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "nflr/phantom.hpp"

namespace nflr {

enum class FeatureVariant { without_reflectance, with_reflectance };

std::string to_string(FeatureVariant v);
const std::vector<std::string>& feature_names(FeatureVariant v);

// Map-derived reflectance summaries of one scan.
struct ReflectanceSummary {
    std::optional<double> nflr_avg;
    std::optional<double> nflr_flv;
};

std::vector<double> build_features(const EyeRecord& record, const ReflectanceSummary& reflectance,
                                   FeatureVariant variant);

struct LogisticConfig {
    double lambda = 1e-3;
    std::size_t max_iterations = 100;
    double tolerance = 1e-8;  // max absolute coefficient change
};

struct IrlsStep {
    std::size_t iteration = 0;
    double objective = 0.0;  // penalized log-likelihood
    double max_change = 0.0;
    int halvings = 0;
};

struct LogisticModel {
    FeatureVariant variant = FeatureVariant::without_reflectance;
    std::vector<std::string> names;
    double intercept = 0.0;
    std::vector<double> coefficients;  // on standardized features
    std::vector<double> mean;
    std::vector<double> sd;
    double lambda = 1e-3;
    std::size_t iterations = 0;
    bool converged = false;
    std::vector<IrlsStep> trace;
};

// Penalized log-likelihood: sum of log-likelihoods minus (lambda / 2) |w|^2;
// the intercept is not penalized. Features are standardized with the
// training mean and SD (n - 1 denominator).
LogisticModel fit_logistic(const std::vector<std::vector<double>>& features, std::span<const int> labels,
                           FeatureVariant variant, const LogisticConfig& cfg = {});

// Objective value of a model on standardized data, for diagnostics.
double penalized_log_likelihood(const LogisticModel& model, const std::vector<std::vector<double>>& features,
                                std::span<const int> labels);

double predict_logistic(const LogisticModel& model, std::span<const double> features);

std::string logistic_to_json(const LogisticModel& model);
LogisticModel logistic_from_json(const std::string& text);

}  // namespace nflr
