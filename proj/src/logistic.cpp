#include "nflr/logistic.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <sstream>

#include "json.hpp"
#include "nflr/error.hpp"
#include "nflr/layers.hpp"

namespace nflr {

std::string to_string(FeatureVariant v) {
    return v == FeatureVariant::without_reflectance ? "without_reflectance" : "with_reflectance";
}

const std::vector<std::string>& feature_names(FeatureVariant v) {
    static const std::vector<std::string> base{"rnfl_avg", "rnfl_flv", "gcc_sup",      "gcc_inf", "gcc_flv",
                                               "vcdr",     "age",      "axial_length", "gender"};
    static const std::vector<std::string> with = [] {
        auto n = base;
        n.push_back("nflr_avg");
        n.push_back("nflr_flv");
        return n;
    }();
    return v == FeatureVariant::without_reflectance ? base : with;
}

std::vector<double> build_features(const EyeRecord& r, const ReflectanceSummary& refl, FeatureVariant variant) {
    std::vector<double> x{r.rnfl_avg, r.rnfl_flv, r.gcc_sup, r.gcc_inf,
                          r.gcc_flv,  r.vcdr,     r.age,     r.axial_length,
                          static_cast<double>(r.gender)};
    if (variant == FeatureVariant::with_reflectance) {
        if (!refl.nflr_avg) throw Error(ErrorKind::validation, "missing field nflr_avg for " + r.subject_id);
        if (!refl.nflr_flv) throw Error(ErrorKind::validation, "missing field nflr_flv for " + r.subject_id);
        x.push_back(*refl.nflr_avg);
        x.push_back(*refl.nflr_flv);
    }
    const auto& names = feature_names(variant);
    for (std::size_t i = 0; i < x.size(); ++i) {
        if (!std::isfinite(x[i])) {
            throw Error(ErrorKind::validation, "missing or non-finite field " + names[i] + " for " + r.subject_id);
        }
    }
    return x;
}

namespace {

Eigen::MatrixXd standardized_design(const std::vector<std::vector<double>>& features, const LogisticModel& m) {
    const auto n = static_cast<Eigen::Index>(features.size());
    const auto p = static_cast<Eigen::Index>(m.mean.size());
    Eigen::MatrixXd x(n, p + 1);
    for (Eigen::Index i = 0; i < n; ++i) {
        const auto& row = features[static_cast<std::size_t>(i)];
        if (row.size() != m.mean.size()) throw Error(ErrorKind::validation, "feature row length mismatch");
        x(i, 0) = 1.0;
        for (Eigen::Index j = 0; j < p; ++j) {
            x(i, j + 1) = (row[static_cast<std::size_t>(j)] - m.mean[static_cast<std::size_t>(j)]) /
                          m.sd[static_cast<std::size_t>(j)];
        }
    }
    return x;
}

// log(1 + exp(z)) without overflow.
double softplus(double z) { return z > 0.0 ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z)); }

double objective(const Eigen::MatrixXd& x, const Eigen::VectorXd& y, const Eigen::VectorXd& beta, double lambda) {
    const Eigen::VectorXd eta = x * beta;
    double ll = 0.0;
    for (Eigen::Index i = 0; i < eta.size(); ++i) ll += y(i) * eta(i) - softplus(eta(i));
    return ll - 0.5 * lambda * beta.tail(beta.size() - 1).squaredNorm();
}

}  // namespace

LogisticModel fit_logistic(const std::vector<std::vector<double>>& features, std::span<const int> labels,
                           FeatureVariant variant, const LogisticConfig& cfg) {
    if (features.size() != labels.size() || features.empty()) {
        throw Error(ErrorKind::validation, "features and labels must be nonempty and equal in length");
    }
    const auto& names = feature_names(variant);
    const std::size_t p = names.size();
    std::size_t n_pos = 0;
    for (int l : labels) n_pos += l == 1;
    if (n_pos == 0 || n_pos == labels.size()) throw Error(ErrorKind::config, "both classes are required");
    if (!(cfg.lambda >= 0.0)) throw Error(ErrorKind::config, "lambda must be >= 0");

    LogisticModel m;
    m.variant = variant;
    m.names = names;
    m.lambda = cfg.lambda;
    m.mean.assign(p, 0.0);
    m.sd.assign(p, 0.0);
    const double n = static_cast<double>(features.size());
    for (const auto& row : features) {
        if (row.size() != p) throw Error(ErrorKind::validation, "feature row length does not match the variant");
        for (std::size_t j = 0; j < p; ++j) m.mean[j] += row[j] / n;
    }
    for (const auto& row : features) {
        for (std::size_t j = 0; j < p; ++j) m.sd[j] += (row[j] - m.mean[j]) * (row[j] - m.mean[j]);
    }
    for (std::size_t j = 0; j < p; ++j) {
        m.sd[j] = std::sqrt(m.sd[j] / std::max(n - 1.0, 1.0));
        if (!(m.sd[j] > 1e-12 * std::max(1.0, std::abs(m.mean[j])))) {
            throw Error(ErrorKind::validation, "feature " + names[j] + " has zero variance");
        }
    }

    const Eigen::MatrixXd x = standardized_design(features, m);
    Eigen::VectorXd y(x.rows());
    for (Eigen::Index i = 0; i < y.size(); ++i) y(i) = labels[static_cast<std::size_t>(i)];
    Eigen::VectorXd penalty = Eigen::VectorXd::Constant(x.cols(), cfg.lambda);
    penalty(0) = 0.0;

    Eigen::VectorXd beta = Eigen::VectorXd::Zero(x.cols());
    double obj = objective(x, y, beta, cfg.lambda);
    m.trace.push_back({0, obj, 0.0, 0});
    for (std::size_t it = 1; it <= cfg.max_iterations; ++it) {
        const Eigen::VectorXd eta = x * beta;
        Eigen::VectorXd mu(eta.size()), w(eta.size());
        for (Eigen::Index i = 0; i < eta.size(); ++i) {
            mu(i) = sigmoid(eta(i));
            w(i) = std::max(mu(i) * (1.0 - mu(i)), 1e-12);
        }
        const Eigen::VectorXd grad = x.transpose() * (y - mu) - penalty.cwiseProduct(beta);
        Eigen::MatrixXd h = x.transpose() * w.asDiagonal() * x;
        h.diagonal() += penalty;
        const Eigen::VectorXd step = h.ldlt().solve(grad);
        if (!step.allFinite()) throw Error(ErrorKind::convergence, "IRLS produced a non-finite step");

        double scale = 1.0;
        int halvings = 0;
        Eigen::VectorXd candidate = beta + step;
        double cand_obj = objective(x, y, candidate, cfg.lambda);
        while (cand_obj < obj && halvings < 30) {
            scale *= 0.5;
            ++halvings;
            candidate = beta + scale * step;
            cand_obj = objective(x, y, candidate, cfg.lambda);
        }
        const double change = (candidate - beta).cwiseAbs().maxCoeff();
        if (cand_obj >= obj) {
            beta = candidate;
            obj = cand_obj;
        }
        m.trace.push_back({it, obj, change, halvings});
        m.iterations = it;
        if (change < cfg.tolerance) {
            m.converged = true;
            break;
        }
    }
    if (!m.converged) {
        std::ostringstream os;
        os << "IRLS did not converge in " << cfg.max_iterations << " iterations; trace (iteration, objective, "
           << "max change, halvings):";
        for (const auto& s : m.trace) os << "\n  " << s.iteration << ", " << s.objective << ", " << s.max_change << ", " << s.halvings;
        throw Error(ErrorKind::convergence, os.str());
    }
    m.intercept = beta(0);
    m.coefficients.assign(beta.data() + 1, beta.data() + beta.size());
    return m;
}

double penalized_log_likelihood(const LogisticModel& model, const std::vector<std::vector<double>>& features,
                                std::span<const int> labels) {
    const Eigen::MatrixXd x = standardized_design(features, model);
    Eigen::VectorXd y(x.rows());
    for (Eigen::Index i = 0; i < y.size(); ++i) y(i) = labels[static_cast<std::size_t>(i)];
    Eigen::VectorXd beta(x.cols());
    beta(0) = model.intercept;
    for (std::size_t j = 0; j < model.coefficients.size(); ++j) beta(static_cast<Eigen::Index>(j) + 1) = model.coefficients[j];
    return objective(x, y, beta, model.lambda);
}

double predict_logistic(const LogisticModel& model, std::span<const double> features) {
    if (features.size() != model.coefficients.size()) {
        throw Error(ErrorKind::validation, "expected " + std::to_string(model.coefficients.size()) +
                                               " features, got " + std::to_string(features.size()));
    }
    double z = model.intercept;
    for (std::size_t j = 0; j < features.size(); ++j) {
        z += model.coefficients[j] * (features[j] - model.mean[j]) / model.sd[j];
    }
    return sigmoid(z);
}

std::string logistic_to_json(const LogisticModel& m) {
    nlohmann::ordered_json j;
    j["format"] = "nflr-logistic/1";
    j["variant"] = to_string(m.variant);
    j["intercept"] = m.intercept;
    auto coefs = nlohmann::ordered_json::array();
    for (std::size_t i = 0; i < m.names.size(); ++i) {
        coefs.push_back({{"name", m.names[i]}, {"value", m.coefficients[i]}, {"mean", m.mean[i]}, {"sd", m.sd[i]}});
    }
    j["coefficients"] = coefs;
    j["lambda"] = m.lambda;
    j["iterations"] = m.iterations;
    j["converged"] = m.converged;
    return j.dump(2) + "\n";
}

LogisticModel logistic_from_json(const std::string& text) {
    const auto j = nlohmann::json::parse(text);
    if (j.value("format", "") != "nflr-logistic/1") throw Error(ErrorKind::validation, "not a logistic model file");
    LogisticModel m;
    const auto v = j.at("variant").get<std::string>();
    if (v == "without_reflectance") {
        m.variant = FeatureVariant::without_reflectance;
    } else if (v == "with_reflectance") {
        m.variant = FeatureVariant::with_reflectance;
    } else {
        throw Error(ErrorKind::validation, "unknown variant " + v);
    }
    m.intercept = j.at("intercept").get<double>();
    for (const auto& c : j.at("coefficients")) {
        m.names.push_back(c.at("name").get<std::string>());
        m.coefficients.push_back(c.at("value").get<double>());
        m.mean.push_back(c.at("mean").get<double>());
        m.sd.push_back(c.at("sd").get<double>());
    }
    if (m.names != feature_names(m.variant)) throw Error(ErrorKind::validation, "coefficient names do not match the variant");
    m.lambda = j.at("lambda").get<double>();
    m.iterations = j.at("iterations").get<std::size_t>();
    m.converged = j.at("converged").get<bool>();
    return m;
}

}  // namespace nflr
