#include "doctest.h"

#include <cmath>

#include "nflr/error.hpp"
#include "nflr/logistic.hpp"
#include "nflr/rng.hpp"

using namespace nflr;

namespace {

struct Data {
    std::vector<std::vector<double>> x;
    std::vector<int> y;
};

Data overlapping(Rng& rng, std::size_t n, std::size_t p) {
    Data d;
    for (std::size_t i = 0; i < n; ++i) {
        const int y = static_cast<int>(i % 2);
        std::vector<double> row(p);
        for (std::size_t j = 0; j < p; ++j) row[j] = rng.normal(y * 0.6 * (j % 3 == 0 ? 1.0 : -0.5), 1.0 + 0.2 * j);
        d.x.push_back(row);
        d.y.push_back(y);
    }
    return d;
}

EyeRecord sample_record() {
    EyeRecord r;
    r.subject_id = "G001";
    r.age = 64;
    r.gender = 1;
    r.axial_length = 24.1;
    r.vf_md = -3.0;
    r.disc_area = 2.0;
    r.rim_area = 1.1;
    r.cd_area_ratio = 0.45;
    r.vcdr = 0.6;
    r.gcc_sup = 88;
    r.gcc_inf = 86;
    r.gcc_flv = 3.1;
    r.rnfl_avg = 85;
    r.rnfl_flv = 6;
    return r;
}

}  // namespace

TEST_CASE("irls agrees with plain gradient ascent on the penalized likelihood") {
    Rng rng(1);
    const auto d = overlapping(rng, 300, 9);
    LogisticConfig cfg;
    cfg.lambda = 0.5;
    const auto m = fit_logistic(d.x, d.y, FeatureVariant::without_reflectance, cfg);
    CHECK(m.converged);

    // Same objective on the standardized design, solved the slow way.
    const std::size_t n = d.x.size(), p = 9;
    std::vector<std::vector<double>> z(n, std::vector<double>(p));
    for (std::size_t j = 0; j < p; ++j) {
        for (std::size_t i = 0; i < n; ++i) z[i][j] = (d.x[i][j] - m.mean[j]) / m.sd[j];
    }
    std::vector<double> w(p + 1, 0.0);
    for (int it = 0; it < 20000; ++it) {
        std::vector<double> g(p + 1, 0.0);
        for (std::size_t i = 0; i < n; ++i) {
            double eta = w[0];
            for (std::size_t j = 0; j < p; ++j) eta += w[j + 1] * z[i][j];
            const double r = d.y[i] - 1.0 / (1.0 + std::exp(-eta));
            g[0] += r;
            for (std::size_t j = 0; j < p; ++j) g[j + 1] += r * z[i][j];
        }
        for (std::size_t j = 1; j <= p; ++j) g[j] -= cfg.lambda * w[j];
        for (std::size_t j = 0; j <= p; ++j) w[j] += 0.01 * g[j];
    }
    CHECK(m.intercept == doctest::Approx(w[0]).epsilon(1e-6));
    for (std::size_t j = 0; j < p; ++j) CHECK(m.coefficients[j] == doctest::Approx(w[j + 1]).epsilon(1e-6));

    // The trace never decreases the objective.
    for (std::size_t i = 1; i < m.trace.size(); ++i) CHECK(m.trace[i].objective >= m.trace[i - 1].objective - 1e-12);
    CHECK(penalized_log_likelihood(m, d.x, d.y) == doctest::Approx(m.trace.back().objective));
}

TEST_CASE("ridge keeps separable data finite") {
    Data d;
    for (int i = 0; i < 40; ++i) {
        std::vector<double> row(9);
        row[0] = i;
        for (std::size_t j = 1; j < 9; ++j) row[j] = std::sin(i * (j + 1.0));
        d.x.push_back(row);
        d.y.push_back(i >= 20);
    }
    const auto m = fit_logistic(d.x, d.y, FeatureVariant::without_reflectance, {});
    for (double c : m.coefficients) CHECK(std::isfinite(c));
    std::vector<double> hi(9, 0.0), lo(9, 0.0);
    hi[0] = 35.0;
    lo[0] = 2.0;
    CHECK(predict_logistic(m, hi) > 0.99);
    CHECK(predict_logistic(m, lo) < 0.01);
}

TEST_CASE("zero-variance features and bad labels are rejected") {
    Data d;
    Rng rng(3);
    for (int i = 0; i < 10; ++i) {
        std::vector<double> row(9);
        for (auto& v : row) v = rng.normal();
        row[4] = 1.0;
        d.x.push_back(row);
        d.y.push_back(i % 2);
    }
    try {
        fit_logistic(d.x, d.y, FeatureVariant::without_reflectance, {});
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::validation);
        CHECK(std::string(e.what()).find("gcc_flv") != std::string::npos);
    }
    for (auto& row : d.x) row[4] = rng.normal();
    std::vector<int> one_class(10, 1);
    CHECK_THROWS_AS(fit_logistic(d.x, one_class, FeatureVariant::without_reflectance, {}), Error);
    CHECK_THROWS_AS(fit_logistic(d.x, d.y, FeatureVariant::with_reflectance, {}), Error);
}

TEST_CASE("feature vectors") {
    const auto rec = sample_record();
    const auto a = build_features(rec, {}, FeatureVariant::without_reflectance);
    CHECK(a.size() == feature_names(FeatureVariant::without_reflectance).size());
    const auto b = build_features(rec, {-9.0, -1.5}, FeatureVariant::with_reflectance);
    CHECK(b.size() == a.size() + 2);
    CHECK(b[b.size() - 2] == -9.0);
    CHECK(b.back() == -1.5);
    try {
        build_features(rec, {-9.0, std::nullopt}, FeatureVariant::with_reflectance);
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(std::string(e.what()).find("nflr_flv") != std::string::npos);
    }
    auto bad = rec;
    bad.vcdr = std::nan("");
    CHECK_THROWS_AS(build_features(bad, {}, FeatureVariant::without_reflectance), Error);
}

TEST_CASE("model json round trip") {
    Rng rng(2);
    const auto d = overlapping(rng, 100, 11);
    const auto m = fit_logistic(d.x, d.y, FeatureVariant::with_reflectance, {});
    const auto back = logistic_from_json(logistic_to_json(m));
    CHECK(back.intercept == m.intercept);
    CHECK(back.coefficients == m.coefficients);
    CHECK(back.sd == m.sd);
    CHECK(back.variant == FeatureVariant::with_reflectance);
    for (const auto& row : d.x) CHECK(predict_logistic(back, row) == predict_logistic(m, row));
}
