#include "doctest.h"

#include <cmath>
#include <map>
#include <set>

#include "nflr/error.hpp"
#include "nflr/phantom.hpp"
#include "nflr/polar_map.hpp"

using namespace nflr;

namespace {

EyeModel quiet_eye(double rnfl, double nflr_db, std::uint64_t seed) {
    PhantomParams params;
    Rng rng(seed);
    EyeModel eye;
    eye.record.subject_id = "N001";
    eye.record.rnfl_avg = rnfl;
    eye.record.gcc_sup = eye.record.gcc_inf = 90.0;
    eye.nflr_target_db = nflr_db;
    eye.anatomy = draw_anatomy(params, rng);
    return eye;
}

ProcessedScan process(const SyntheticEye& s, const MapGeometry& geo) {
    return process_scan(s.profiles, s.vessel_mask, s.disc_offset, geo);
}

}  // namespace

TEST_CASE("clean synthesis reproduces the requested averages") {
    const MapGeometry geo;
    const PhantomParams params;
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        const auto eye = quiet_eye(95.0 + static_cast<double>(seed), -8.5, seed);
        Rng rng(seed);
        const auto s = synth_maps(eye, {}, geo, params, rng, {false});
        const auto out = process(s, geo);
        CHECK(std::abs(grid_average(out.thickness) - eye.record.rnfl_avg) <= 0.5);
        CHECK(grid_average(out.reflectance) == doctest::Approx(-8.5).epsilon(0.02));
    }
}

TEST_CASE("a 0.4 thickness defect leaves about 0.6 of the clean value") {
    const MapGeometry geo;
    PhantomParams params;
    params.calibrate_after_defects = false;
    auto eye = quiet_eye(100.0, -8.0, 9);
    Rng r1(1), r2(1);
    const auto clean = process(synth_maps(eye, {}, geo, params, r1, {false}), geo);
    DefectSpec d;
    d.center_track = 8;
    d.width_tracks = 3;
    d.depth_thickness = 0.4;
    d.depth_reflectance = 2.0;
    d.segment_begin = 0;
    d.segment_end = 32;
    eye.defects = {d};
    const auto hurt = process(synth_maps(eye, {}, geo, params, r2, {false}), geo);
    double a = 0.0, b = 0.0;
    for (std::size_t s = 2; s < 30; ++s) {
        for (int k = 7; k <= 9; ++k) {
            if (clean.thickness.empty_cell(s, static_cast<std::size_t>(k))) continue;
            a += clean.thickness.values(s, static_cast<std::size_t>(k));
            b += hurt.thickness.values(s, static_cast<std::size_t>(k));
        }
    }
    CHECK(b / a == doctest::Approx(0.6).epsilon(0.05));

    // Calibrated after defects, the damaged map keeps the clinical average.
    params.calibrate_after_defects = true;
    Rng r3(1);
    const auto calibrated = process(synth_maps(eye, {}, geo, params, r3, {false}), geo);
    CHECK(std::abs(grid_average(calibrated.thickness) - 100.0) <= 0.5);
    CHECK(grid_average(calibrated.reflectance) == doctest::Approx(-8.0).epsilon(0.02));
    CHECK(std::abs(grid_average(hurt.thickness) - 100.0) > 2.0);

    DefectSpec outside = d;
    outside.segment_end = 40;
    CHECK_THROWS_AS(outside.validate(32, 32), Error);
}

TEST_CASE("the azimuthal filter strips most of the incident-angle bias") {
    MapGeometry geo;
    const PhantomParams params;
    const auto eye = quiet_eye(100.0, -8.0, 4);
    ScanConditions biased;
    biased.bias_amplitude = 3.0;
    biased.bias_phase = 1.1;
    Rng r1(1), r2(1);
    const auto s0 = synth_maps(eye, {}, geo, params, r1, {false});
    const auto s1 = synth_maps(eye, biased, geo, params, r2, {false});
    const auto raw0 = processed_reflectance_map(s0.profiles, s0.vessel_mask, {0, 0}, geo, false);
    const auto raw1 = processed_reflectance_map(s1.profiles, s1.vessel_mask, {0, 0}, geo, false);
    const auto f1 = processed_reflectance_map(s1.profiles, s1.vessel_mask, {0, 0}, geo, true);
    double before = 0.0, after = 0.0;
    for (std::size_t i = 0; i < raw0.values.size(); ++i) {
        if (!raw0.valid.data()[i]) continue;
        before += std::pow(raw1.values.data()[i] - raw0.values.data()[i], 2);
        after += std::pow(f1.values.data()[i] - raw0.values.data()[i], 2);
    }
    CHECK(std::sqrt(after) * 10.0 <= std::sqrt(before));
}

TEST_CASE("default cohort plan has the published counts") {
    const auto plan =
        plan_cohort(CohortSpec{}, PhenotypeSpec::defaults(), PhantomParams{}, MapGeometry{}, 1729);
    std::set<std::string> normal_subjects, pg_subjects;
    std::size_t normal_eyes = 0, pg_eyes = 0, normal_scans = 0, pg_scans = 0;
    for (const auto& pe : plan.eyes) {
        const bool pg = pe.model.record.group == Group::pg;
        (pg ? pg_subjects : normal_subjects).insert(pe.model.record.subject_id);
        (pg ? pg_eyes : normal_eyes)++;
        (pg ? pg_scans : normal_scans) += pe.scans.size();
        CHECK(pe.model.defects.empty() == !pg);
        CHECK((pe.scans.size() == 2 || pe.scans.size() == 3));
    }
    CHECK(normal_subjects.size() == 106);
    CHECK(pg_subjects.size() == 164);
    CHECK(normal_eyes == 210);
    CHECK(pg_eyes == 238);
    CHECK(normal_scans == 620);
    CHECK(pg_scans == 671);
}

TEST_CASE("cohort generation is deterministic and repeat scans share the eye") {
    CohortSpec spec;
    spec.n_normal_subjects = 4;
    spec.n_pg_subjects = 4;
    const MapGeometry geo;
    const PhantomParams params;
    const auto a = plan_cohort(spec, PhenotypeSpec::defaults(), params, geo, 5);
    const auto b = plan_cohort(spec, PhenotypeSpec::defaults(), params, geo, 5);
    REQUIRE(a.eyes.size() == b.eyes.size());
    for (std::size_t e = 0; e < a.eyes.size(); ++e) {
        const auto x = render_scan(a, e, 0, geo, params);
        const auto y = render_scan(b, e, 0, geo, params);
        CHECK(x.profiles.nfl_thickness == y.profiles.nfl_thickness);
        CHECK(x.profiles.nfl_band_sum == y.profiles.nfl_band_sum);
        const auto z = render_scan(a, e, 1, geo, params);
        CHECK(z.record.subject_id == x.record.subject_id);
        CHECK(z.record.rnfl_avg == x.record.rnfl_avg);
        CHECK(z.defects.size() == x.defects.size());
        CHECK(z.profiles.nfl_thickness != x.profiles.nfl_thickness);
        CHECK(scan_id(z.record, z.record.scan_index) != scan_id(x.record, x.record.scan_index));
    }
    const auto c = plan_cohort(spec, PhenotypeSpec::defaults(), params, geo, 6);
    CHECK(render_scan(c, 0, 0, geo, params).profiles.nfl_thickness !=
          render_scan(a, 0, 0, geo, params).profiles.nfl_thickness);
}

TEST_CASE("records respect their invariants") {
    const auto plan =
        plan_cohort(CohortSpec{}, PhenotypeSpec::defaults(), PhantomParams{}, MapGeometry{}, 77);
    std::map<Group, std::vector<double>> vcdr, rim;
    for (const auto& pe : plan.eyes) {
        const auto& r = pe.model.record;
        CHECK_NOTHROW(r.validate());
        vcdr[r.group].push_back(r.vcdr);
        rim[r.group].push_back(r.rim_area);
    }
    const auto mean = [](const std::vector<double>& v) {
        double s = 0.0;
        for (double x : v) s += x;
        return s / static_cast<double>(v.size());
    };
    CHECK(mean(vcdr[Group::pg]) > mean(vcdr[Group::normal]));
    CHECK(mean(rim[Group::pg]) < mean(rim[Group::normal]));

    EyeRecord bad = plan.eyes.front().model.record;
    bad.rim_area = bad.disc_area + 1.0;
    CHECK_THROWS_AS(bad.validate(), Error);
}

TEST_CASE("phenotype and cohort validation") {
    auto ph = PhenotypeSpec::defaults();
    ph.normal[Field::age].sd = -1.0;
    CHECK_THROWS_AS(ph.validate(), Error);
    CohortSpec spec;
    spec.pg_single_eye_fraction = 1.5;
    CHECK_THROWS_AS(spec.validate(), Error);
    CHECK(group_from_string(to_string(Group::pg)) == Group::pg);
    CHECK(eye_from_string(to_string(Eye::os)) == Eye::os);
}
