#include "nflr/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "nflr/error.hpp"

namespace nflr {

namespace {

constexpr double pi = std::numbers::pi;
constexpr double two_pi = 2.0 * pi;
// Radius where the radial thickness profile equals its nominal level.
constexpr double reference_radius = 1.575;

double wrap_pm(double a) {
    a = std::fmod(a + pi, two_pi);
    if (a < 0.0) a += two_pi;
    return a - pi;
}

double normal_pdf(double x) {
    if (!std::isfinite(x)) return 0.0;
    return std::exp(-0.5 * x * x) / std::sqrt(two_pi);
}

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::sqrt(2.0)); }

struct Moments {
    double mean;
    double var;
};

// Mean and variance of N(mu, sd^2) truncated to [lo, hi].
Moments truncated_moments(const FieldDistribution& d) {
    if (d.sd <= 0.0) return {std::clamp(d.mean, d.lo, d.hi), 0.0};
    const double a = (d.lo - d.mean) / d.sd;
    const double b = (d.hi - d.mean) / d.sd;
    const double z = normal_cdf(b) - normal_cdf(a);
    const double pa = normal_pdf(a);
    const double pb = normal_pdf(b);
    const double apa = std::isfinite(a) ? a * pa : 0.0;
    const double bpb = std::isfinite(b) ? b * pb : 0.0;
    const double shift = (pa - pb) / z;
    return {d.mean + d.sd * shift, d.sd * d.sd * (1.0 + (apa - bpb) / z - shift * shift)};
}

double draw_truncated(double mean, double sd, double lo, double hi, Rng& rng) {
    if (sd <= 0.0) return std::clamp(mean, lo, hi);
    for (int attempt = 0; attempt < 1000; ++attempt) {
        const double x = rng.normal(mean, sd);
        if (x >= lo && x <= hi) return x;
    }
    return std::clamp(mean, lo, hi);
}

double bump(double x, double width) {
    const double d = wrap_pm(x);
    return std::exp(-0.5 * d * d / (width * width));
}

// Angular thickness profile relative to the baseline level.
double angular_profile(const EyeAnatomy& a, double theta) {
    double h = 1.0 + a.bundle_gain * (bump(theta - pi / 2.0 - a.rotation, a.bundle_width) +
                                      bump(theta - 3.0 * pi / 2.0 - a.rotation, a.bundle_width));
    for (std::size_t k = 0; k < a.ripple_amp.size(); ++k) {
        h += a.ripple_amp[k] * std::cos(static_cast<double>(k + 2) * theta + a.ripple_phase[k]);
    }
    return h;
}

double radial_profile(const EyeAnatomy& a, double r) {
    return std::exp(-(r - reference_radius) / a.decay_length);
}

// Zero-level reflectance shape in dB: brighter over the arcuate bundles.
double reflectance_shape(const EyeAnatomy& a, double r, double theta) {
    const double bundles = bump(theta - pi / 2.0 - a.rotation, a.bundle_width) +
                           bump(theta - 3.0 * pi / 2.0 - a.rotation, a.bundle_width);
    double ripple = 0.0;
    for (std::size_t k = 0; k < a.ripple_amp.size(); ++k) {
        ripple += a.ripple_amp[k] * std::cos(static_cast<double>(k + 2) * theta + a.ripple_phase[k]);
    }
    return a.reflectance_contrast * bundles + 10.0 * ripple - 0.6 * (r - reference_radius);
}

// Mean over the dense annulus rows of a separable-in-angle ring quantity,
// reproducing what ring interpolation followed by annulus masking yields.
template <typename RowMean>
double annulus_mean_after_interpolation(const MapGeometry& g, RowMean&& row_mean) {
    const auto diam = g.ring_diameters();
    std::vector<double> ring_r(diam.size()), ring_mean(diam.size());
    for (std::size_t k = 0; k < diam.size(); ++k) {
        ring_r[k] = diam[k] / 2.0;
        ring_mean[k] = row_mean(ring_r[k]);
    }
    double sum = 0.0;
    std::size_t n = 0;
    for (double r : g.dense_radii()) {
        if (r < g.annulus.inner_radius() || r > g.annulus.outer_radius()) continue;
        auto it = std::upper_bound(ring_r.begin(), ring_r.end(), r);
        std::size_t k = it == ring_r.begin() ? 0 : static_cast<std::size_t>(it - ring_r.begin()) - 1;
        k = std::min(k, ring_r.size() - 2);
        const double w = (r - ring_r[k]) / (ring_r[k + 1] - ring_r[k]);
        sum += (1.0 - w) * ring_mean[k] + w * ring_mean[k + 1];
        ++n;
    }
    return sum / static_cast<double>(n);
}

template <typename F>
double angular_mean(std::size_t n_angles, F&& f) {
    double s = 0.0;
    for (std::size_t j = 0; j < n_angles; ++j) s += f(two_pi * static_cast<double>(j) / static_cast<double>(n_angles));
    return s / static_cast<double>(n_angles);
}

}  // namespace

std::string to_string(Group g) { return g == Group::normal ? "normal" : "pg"; }

Group group_from_string(const std::string& s) {
    if (s == "normal") return Group::normal;
    if (s == "pg") return Group::pg;
    throw Error(ErrorKind::validation, "unknown group '" + s + "'");
}

std::string to_string(Eye e) { return e == Eye::od ? "OD" : "OS"; }

Eye eye_from_string(const std::string& s) {
    if (s == "OD") return Eye::od;
    if (s == "OS") return Eye::os;
    throw Error(ErrorKind::validation, "unknown eye '" + s + "'");
}

void EyeRecord::validate() const {
    auto fail = [](const std::string& what) { throw Error(ErrorKind::validation, what); };
    if (!(cd_area_ratio >= 0.0 && cd_area_ratio <= 1.0)) fail("cd_area_ratio outside [0, 1]");
    if (!(vcdr >= 0.0 && vcdr <= 1.0)) fail("vcdr outside [0, 1]");
    if (!(rim_area <= disc_area)) fail("rim_area exceeds disc_area");
    if (!(gcc_sup > 0.0 && gcc_inf > 0.0 && rnfl_avg > 0.0)) fail("gcc/rnfl values must be positive");
    if (!(gcc_flv >= 0.0 && rnfl_flv >= 0.0)) fail("focal loss volumes must be nonnegative");
}

const char* field_name(Field f) {
    switch (f) {
    case Field::age: return "age";
    case Field::female: return "female";
    case Field::axial_length: return "axial_length";
    case Field::vf_md: return "vf_md";
    case Field::disc_area: return "disc_area";
    case Field::rim_area: return "rim_area";
    case Field::cd_area_ratio: return "cd_area_ratio";
    case Field::vcdr: return "vcdr";
    case Field::gcc_sup: return "gcc_sup";
    case Field::gcc_inf: return "gcc_inf";
    case Field::gcc_flv: return "gcc_flv";
    case Field::rnfl_avg: return "rnfl_avg";
    case Field::rnfl_flv: return "rnfl_flv";
    case Field::nflr_avg: return "nflr_avg";
    case Field::count_: break;
    }
    return "?";
}

bool severity_linked(Field f) {
    switch (f) {
    case Field::rim_area:
    case Field::cd_area_ratio:
    case Field::vcdr:
    case Field::gcc_sup:
    case Field::gcc_inf:
    case Field::gcc_flv:
    case Field::rnfl_avg:
    case Field::rnfl_flv:
    case Field::nflr_avg: return true;
    default: return false;
    }
}

PhenotypeSpec PhenotypeSpec::defaults() {
    PhenotypeSpec p;
    auto set = [](GroupPhenotype& g, Field f, double mean, double sd, double lo, double hi) {
        g[f] = {mean, sd, lo, hi};
    };
    auto& n = p.normal;
    set(n, Field::age, 59.8, 9.72, 18.0, 95.0);
    set(n, Field::female, 70.0 / 106.0, 0.0, 0.0, 1.0);
    set(n, Field::axial_length, 23.7, 1.03, 20.0, 30.0);
    set(n, Field::vf_md, -0.10, 1.02, -6.0, 4.0);
    set(n, Field::disc_area, 2.11, 0.348, 0.8, 4.5);
    set(n, Field::rim_area, 1.42, 0.269, 0.1, 3.5);
    set(n, Field::cd_area_ratio, 0.315, 0.143, 0.0, 1.0);
    set(n, Field::vcdr, 0.510, 0.156, 0.0, 1.0);
    set(n, Field::gcc_sup, 94.9, 6.78, 30.0, 140.0);
    set(n, Field::gcc_inf, 96.1, 7.09, 30.0, 140.0);
    set(n, Field::gcc_flv, 0.735, 0.955, 0.0, 40.0);
    set(n, Field::rnfl_avg, 99.2, 8.53, 30.0, 160.0);
    set(n, Field::rnfl_flv, 1.72, 1.90, 0.0, 60.0);
    set(n, Field::nflr_avg, -8.11, 1.29, -25.0, 0.0);

    auto& g = p.pg;
    set(g, Field::age, 63.8, 9.49, 18.0, 95.0);
    set(g, Field::female, 97.0 / 164.0, 0.0, 0.0, 1.0);
    set(g, Field::axial_length, 24.4, 1.32, 20.0, 30.0);
    set(g, Field::vf_md, -4.57, 3.96, -30.0, 0.0);
    set(g, Field::disc_area, 2.17, 0.450, 0.8, 4.5);
    set(g, Field::rim_area, 0.904, 0.357, 0.05, 3.5);
    set(g, Field::cd_area_ratio, 0.569, 0.184, 0.0, 1.0);
    set(g, Field::vcdr, 0.751, 0.162, 0.0, 1.0);
    set(g, Field::gcc_sup, 84.2, 10.6, 30.0, 140.0);
    set(g, Field::gcc_inf, 80.4, 11.6, 30.0, 140.0);
    set(g, Field::gcc_flv, 5.34, 3.91, 0.0, 40.0);
    set(g, Field::rnfl_avg, 80.1, 11.8, 30.0, 160.0);
    set(g, Field::rnfl_flv, 7.71, 4.54, 0.0, 60.0);
    set(g, Field::nflr_avg, -11.6, 2.26, -25.0, 0.0);
    return p;
}

void PhenotypeSpec::validate() const {
    for (const auto* g : {&normal, &pg}) {
        for (std::size_t i = 0; i < field_count; ++i) {
            const auto& d = g->fields[i];
            const std::string name = field_name(static_cast<Field>(i));
            if (!(d.sd >= 0.0)) throw Error(ErrorKind::config, "phenotype SD must be >= 0 for " + name);
            if (!(d.lo <= d.hi)) throw Error(ErrorKind::config, "phenotype bounds inverted for " + name);
        }
        const auto& cd = (*g)[Field::cd_area_ratio];
        const auto& vc = (*g)[Field::vcdr];
        if (cd.lo < 0.0 || cd.hi > 1.0 || vc.lo < 0.0 || vc.hi > 1.0) {
            throw Error(ErrorKind::config, "ratio bounds must lie within [0, 1]");
        }
        const auto& fem = (*g)[Field::female];
        if (fem.mean < 0.0 || fem.mean > 1.0) throw Error(ErrorKind::config, "female fraction outside [0, 1]");
        for (Field f : {Field::gcc_sup, Field::gcc_inf, Field::rnfl_avg}) {
            if (!((*g)[f].lo > 0.0)) throw Error(ErrorKind::config, std::string(field_name(f)) + " lower bound must be > 0");
        }
        for (Field f : {Field::gcc_flv, Field::rnfl_flv}) {
            if ((*g)[f].lo < 0.0) throw Error(ErrorKind::config, std::string(field_name(f)) + " lower bound must be >= 0");
        }
    }
}

namespace {

double expected_vf_loss(const PhenotypeSpec& p) {
    const auto m = truncated_moments(p.pg[Field::vf_md]);
    return std::max(-m.mean, 1e-9);
}

void store_field(EyeRecord& r, double& nflr, Field f, double v) {
    switch (f) {
    case Field::age: r.age = v; break;
    case Field::female: r.gender = v >= 0.5 ? 1 : 0; break;
    case Field::axial_length: r.axial_length = v; break;
    case Field::vf_md: r.vf_md = v; break;
    case Field::disc_area: r.disc_area = v; break;
    case Field::rim_area: r.rim_area = v; break;
    case Field::cd_area_ratio: r.cd_area_ratio = v; break;
    case Field::vcdr: r.vcdr = v; break;
    case Field::gcc_sup: r.gcc_sup = v; break;
    case Field::gcc_inf: r.gcc_inf = v; break;
    case Field::gcc_flv: r.gcc_flv = v; break;
    case Field::rnfl_avg: r.rnfl_avg = v; break;
    case Field::rnfl_flv: r.rnfl_flv = v; break;
    case Field::nflr_avg: nflr = v; break;
    case Field::count_: break;
    }
}

double load_field(const EyeRecord& r, double nflr, Field f) {
    switch (f) {
    case Field::age: return r.age;
    case Field::female: return r.gender;
    case Field::axial_length: return r.axial_length;
    case Field::vf_md: return r.vf_md;
    case Field::disc_area: return r.disc_area;
    case Field::rim_area: return r.rim_area;
    case Field::cd_area_ratio: return r.cd_area_ratio;
    case Field::vcdr: return r.vcdr;
    case Field::gcc_sup: return r.gcc_sup;
    case Field::gcc_inf: return r.gcc_inf;
    case Field::gcc_flv: return r.gcc_flv;
    case Field::rnfl_avg: return r.rnfl_avg;
    case Field::rnfl_flv: return r.rnfl_flv;
    case Field::nflr_avg: return nflr;
    case Field::count_: break;
    }
    return 0.0;
}

}  // namespace

double severity_of(const EyeRecord& record, const PhenotypeSpec& phenotype) {
    if (record.group == Group::normal) return 0.0;
    return std::max(0.0, -record.vf_md) / expected_vf_loss(phenotype);
}

ClinicalDraw sample_clinical(Group group, const PhenotypeSpec& phenotype, Rng& rng) {
    const auto& gp = phenotype.of(group);
    ClinicalDraw out;
    out.record.group = group;

    auto draw = [&](Field f) {
        const auto& d = gp[f];
        return draw_truncated(d.mean, d.sd, d.lo, d.hi, rng);
    };

    out.record.gender = rng.uniform() < gp[Field::female].mean ? 1 : 0;
    double severity = 1.0;
    double severity_var = 0.0;
    for (std::size_t i = 0; i < field_count; ++i) {
        const auto f = static_cast<Field>(i);
        if (f == Field::female) continue;
        double v;
        if (group == Group::pg && severity_linked(f)) {
            const auto& d = gp[f];
            const double delta = d.mean - phenotype.normal[f].mean;
            const double explained = delta * delta * severity_var;
            const double resid = std::max(std::sqrt(std::max(d.sd * d.sd - explained, 0.0)), 0.35 * d.sd);
            v = draw_truncated(phenotype.normal[f].mean + delta * severity, resid, d.lo, d.hi, rng);
        } else {
            v = draw(f);
        }
        if (group == Group::pg && f == Field::vf_md) {
            const auto m = truncated_moments(gp[Field::vf_md]);
            const double loss = expected_vf_loss(phenotype);
            severity = std::max(0.0, -v) / loss;
            severity_var = m.var / (loss * loss);
        }
        store_field(out.record, out.nflr_target_db, f, v);
    }
    out.record.rim_area = std::min(out.record.rim_area, out.record.disc_area);
    return out;
}

// ---------------------------------------------------------------------------

void DefectSpec::validate(std::size_t n_tracks, std::size_t n_segments) const {
    const auto nt = static_cast<int>(n_tracks);
    const auto ns = static_cast<int>(n_segments);
    if (center_track < 0 || center_track >= nt || width_tracks < 1 || width_tracks > nt) {
        throw Error(ErrorKind::config, "defect track footprint exceeds the grid");
    }
    if (segment_begin < 0 || segment_end > ns || segment_begin >= segment_end) {
        throw Error(ErrorKind::config, "defect radial extent exceeds the grid");
    }
    if (depth_thickness < 0.0 || depth_thickness > 1.0 || depth_reflectance < 0.0) {
        throw Error(ErrorKind::config, "defect depth out of range");
    }
}

bool DefectSpec::covers_track(int track, std::size_t n_tracks) const {
    const auto nt = static_cast<int>(n_tracks);
    const int first = center_track - width_tracks / 2;
    const int offset = ((track - first) % nt + nt) % nt;
    return offset < width_tracks;
}

bool DefectSpec::covers_segment(double s, std::size_t n_segments) const {
    const bool lo_ok = segment_begin == 0 || s >= segment_begin;
    const bool hi_ok = segment_end == static_cast<int>(n_segments) || s < segment_end;
    return lo_ok && hi_ok;
}

void PhantomParams::validate() const {
    if (thickness_noise_um < 0.0 || reflectance_noise_db < 0.0) throw Error(ErrorKind::config, "noise must be >= 0");
    if (max_disc_offset_mm < 0.0 || max_bias_db < 0.0) throw Error(ErrorKind::config, "offset/bias ranges must be >= 0");
    if (min_vessels < 0 || max_vessels < min_vessels) throw Error(ErrorKind::config, "invalid vessel count range");
    if (bundle_width_mean <= 0.0) throw Error(ErrorKind::config, "bundle width must be > 0");
}

EyeAnatomy draw_anatomy(const PhantomParams& params, Rng& rng) {
    EyeAnatomy a;
    a.rotation = rng.normal(0.0, params.rotation_sd);
    a.bundle_width = std::clamp(rng.normal(params.bundle_width_mean, params.bundle_width_sd), 0.25, 1.0);
    a.bundle_gain = std::clamp(rng.normal(params.bundle_gain_mean, params.bundle_gain_sd), 0.3, 1.6);
    a.decay_length = std::clamp(rng.normal(1.5, 0.15), 1.0, 2.2);
    for (std::size_t k = 0; k < a.ripple_amp.size(); ++k) {
        a.ripple_amp[k] = rng.normal(0.0, params.ripple_sd);
        a.ripple_phase[k] = rng.uniform(0.0, two_pi);
    }
    a.reflectance_contrast = std::clamp(rng.normal(1.5, 0.2), 0.5, 3.0);
    a.ppec_level = rng.uniform(80.0, 160.0);
    return a;
}

std::vector<DefectSpec> draw_defects(double severity, const MapGeometry& geometry,
                                     const PhantomParams& params, Rng& rng) {
    const auto nt = static_cast<int>(geometry.n_tracks);
    const auto ns = static_cast<int>(geometry.n_segments);
    const int n_defects = severity > params.second_defect_severity ? 2 : 1;
    std::vector<DefectSpec> out;
    bool superior = rng.uniform() < 0.5;
    for (int d = 0; d < n_defects; ++d) {
        DefectSpec s;
        // Arcuate bundle regions sit around 90 and 270 degrees.
        const double centre_angle = (superior ? pi / 2.0 : 3.0 * pi / 2.0) + rng.uniform(-0.6, 0.6);
        s.center_track = static_cast<int>(std::floor(centre_angle / two_pi * nt)) % nt;
        const double width = params.defect_width_base + params.defect_width_slope * severity + rng.uniform(-0.5, 0.5);
        s.width_tracks = std::clamp(static_cast<int>(std::lround(width)), 1, std::max(1, nt / 3));
        s.depth_thickness = std::clamp(
            params.defect_depth_thickness_base + params.defect_depth_thickness_slope * severity, 0.0, 0.7);
        s.depth_reflectance = std::max(
            0.0, params.defect_depth_reflectance_base + params.defect_depth_reflectance_slope * severity);
        const double extent = rng.uniform();
        if (extent < 0.6) {
            s.segment_begin = 0;
            s.segment_end = ns;
        } else if (extent < 0.85) {
            s.segment_begin = 0;
            s.segment_end = std::max(1, static_cast<int>(std::lround(ns * rng.uniform(0.4, 0.9))));
        } else {
            s.segment_begin = std::min(ns - 1, static_cast<int>(std::lround(ns * rng.uniform(0.1, 0.5))));
            s.segment_end = ns;
        }
        out.push_back(s);
        superior = !superior;
    }
    return out;
}

std::vector<Vessel> draw_vessels(const PhantomParams& params, Rng& rng) {
    const int span = params.max_vessels - params.min_vessels + 1;
    const int n = params.min_vessels + static_cast<int>(rng.below(static_cast<std::uint64_t>(span)));
    std::vector<Vessel> out(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) {
        // Alternate superior / inferior arcades.
        const double centre = (i % 2 == 0) ? pi / 2.0 : 3.0 * pi / 2.0;
        out[static_cast<std::size_t>(i)].seed_angle = centre + rng.uniform(-0.9, 0.9);
        out[static_cast<std::size_t>(i)].width = rng.uniform(0.07, 0.13);
    }
    return out;
}

ScanConditions draw_scan_conditions(const PhantomParams& params, Rng& rng) {
    ScanConditions c;
    const double rho = params.max_disc_offset_mm * std::sqrt(rng.uniform());
    const double phi = rng.uniform(0.0, two_pi);
    c.disc_offset = {rho * std::cos(phi), rho * std::sin(phi)};
    c.bias_amplitude = rng.uniform(0.0, params.max_bias_db);
    c.bias_phase = rng.uniform(0.0, two_pi);
    return c;
}

SyntheticEye synth_maps(const EyeModel& eye, const ScanConditions& scan, const MapGeometry& geometry,
                        const PhantomParams& params, Rng& rng, NoiseSwitch noise) {
    geometry.validate();
    for (const auto& d : eye.defects) d.validate(geometry.n_tracks, geometry.n_segments);
    const auto [dx, dy] = scan.disc_offset;
    if (!(std::hypot(dx, dy) < geometry.annulus.inner_radius())) {
        throw Error(ErrorKind::config, "disc offset exceeds the inner annulus radius");
    }

    const auto& a = eye.anatomy;
    const std::size_t na = geometry.n_angles;
    // Defect factors at a disc-centred position.
    const auto thinning = [&](double r, double theta) {
        const auto cell = cell_coordinate(r, theta, geometry.trajectory, geometry.annulus, geometry.n_tracks,
                                          geometry.n_segments);
        const int track = std::min(static_cast<int>(cell.track), static_cast<int>(geometry.n_tracks) - 1);
        std::pair<double, double> f{1.0, 0.0};
        for (const auto& d : eye.defects) {
            if (d.covers_track(track, geometry.n_tracks) && d.covers_segment(cell.segment, geometry.n_segments)) {
                f.first *= 1.0 - d.depth_thickness;
                f.second += d.depth_reflectance;
            }
        }
        return f;
    };
    double thick_scale, refl_level;
    if (params.calibrate_after_defects && !eye.defects.empty()) {
        thick_scale = eye.record.rnfl_avg / annulus_mean_after_interpolation(geometry, [&](double r) {
                          return radial_profile(a, r) *
                                 angular_mean(na, [&](double t) { return angular_profile(a, t) * thinning(r, t).first; });
                      });
        refl_level = eye.nflr_target_db - annulus_mean_after_interpolation(geometry, [&](double r) {
                         return angular_mean(na, [&](double t) { return reflectance_shape(a, r, t) - thinning(r, t).second; });
                     });
    } else {
        const double mean_h = angular_mean(na, [&](double t) { return angular_profile(a, t); });
        thick_scale = eye.record.rnfl_avg /
                      annulus_mean_after_interpolation(geometry, [&](double r) { return radial_profile(a, r) * mean_h; });
        refl_level = eye.nflr_target_db - annulus_mean_after_interpolation(geometry, [&](double r) {
                         return angular_mean(na, [&](double t) { return reflectance_shape(a, r, t); });
                     });
    }

    SyntheticEye out;
    out.record = eye.record;
    out.disc_offset = scan.disc_offset;
    out.defects = eye.defects;
    out.bias_amplitude = scan.bias_amplitude;
    out.bias_phase = scan.bias_phase;

    auto& p = out.profiles;
    p.ring_diameters = geometry.ring_diameters();
    const std::size_t nr = p.ring_diameters.size();
    p.nfl_band_sum = Grid2D<double>(nr, na);
    p.ppec_band_mean = Grid2D<double>(nr, na);
    p.nfl_thickness = Grid2D<double>(nr, na);
    Grid2D<std::uint8_t> corrupted(nr, na, 0);

    for (std::size_t k = 0; k < nr; ++k) {
        const double ring_r = p.ring_diameters[k] / 2.0;
        for (std::size_t j = 0; j < na; ++j) {
            const double theta_s = two_pi * static_cast<double>(j) / static_cast<double>(na);
            // Disc-centred position of this scan sample.
            const double qx = ring_r * std::cos(theta_s) + dx;
            const double qy = ring_r * std::sin(theta_s) + dy;
            const double r = std::hypot(qx, qy);
            const double theta = std::atan2(qy, qx);

            double thick = thick_scale * radial_profile(a, r) * angular_profile(a, theta);
            double refl = refl_level + reflectance_shape(a, r, theta);

            const auto cell = cell_coordinate(r, theta, geometry.trajectory, geometry.annulus,
                                              geometry.n_tracks, geometry.n_segments);
            const auto [keep, loss_db] = thinning(r, theta);
            thick *= keep;
            refl -= loss_db;

            refl += scan.bias_amplitude * std::cos(theta - scan.bias_phase);
            if (noise.enabled) {
                thick += rng.normal(0.0, params.thickness_noise_um);
                refl += rng.normal(0.0, params.reflectance_noise_db);
            }

            const double seed_angle = cell.track / static_cast<double>(geometry.n_tracks) * two_pi;
            for (const auto& v : eye.vessels) {
                if (std::abs(wrap_pm(seed_angle - v.seed_angle)) * r < v.width / 2.0) {
                    corrupted(k, j) = 1;
                    break;
                }
            }
            if (corrupted(k, j)) {
                thick += params.vessel_thickness_gain_um;
                refl -= params.vessel_reflectance_drop_db;
            }

            const double ppec = a.ppec_level * (1.0 + 0.05 * std::cos(2.0 * theta)) *
                                std::exp(-0.1 * (r - reference_radius));
            p.ppec_band_mean(k, j) = ppec;
            p.nfl_band_sum(k, j) = ppec * std::pow(10.0, refl / 10.0);
            p.nfl_thickness(k, j) = std::max(thick, 1.0);
        }
    }

    out.vessel_mask = expand_ring_mask(corrupted, p.ring_radii(), geometry.dense_radii());
    out.ring_vessel_mask = std::move(corrupted);
    return out;
}

// ---------------------------------------------------------------------------

void CohortSpec::validate() const {
    if (n_normal_subjects < 1 || n_pg_subjects < 1) throw Error(ErrorKind::config, "subject counts must be >= 1");
    for (double f : {normal_single_eye_fraction, pg_single_eye_fraction, normal_three_scan_fraction,
                     pg_three_scan_fraction}) {
        if (!(f >= 0.0 && f <= 1.0)) throw Error(ErrorKind::config, "cohort fractions must lie in [0, 1]");
    }
}

std::size_t CohortPlan::scan_count() const {
    std::size_t n = 0;
    for (const auto& e : eyes) n += e.scans.size();
    return n;
}

std::string scan_id(const EyeRecord& record, int scan_index) {
    return record.subject_id + "_" + to_string(record.eye) + "_" + std::to_string(scan_index);
}

namespace {

enum StreamTag : std::uint64_t {
    tag_group = 1,
    tag_subject = 2,
    tag_eye = 3,
    tag_defects = 4,
    tag_scan_conditions = 5,
    tag_scan_noise = 6,
};

std::uint64_t subject_key(Group g, int subject_number) {
    return (g == Group::normal ? 0ULL : 1ULL) << 32 | static_cast<std::uint64_t>(subject_number);
}

// Affine adjustment of `values` to the target mean / SD.
void match_moments(std::vector<double*>& values, double mean, double sd) {
    if (values.size() < 2) return;
    double m = 0.0;
    for (double* v : values) m += *v;
    m /= static_cast<double>(values.size());
    double ss = 0.0;
    for (double* v : values) ss += (*v - m) * (*v - m);
    const double s = std::sqrt(ss / static_cast<double>(values.size() - 1));
    const double scale = s > 0.0 ? sd / s : 0.0;
    for (double* v : values) *v = mean + (*v - m) * scale;
}

std::vector<std::uint8_t> exact_selection(std::size_t n, double fraction, Rng& rng) {
    const auto k = static_cast<std::size_t>(std::lround(fraction * static_cast<double>(n)));
    std::vector<std::uint8_t> pick(n, 0);
    for (std::size_t i = 0; i < std::min(k, n); ++i) pick[i] = 1;
    rng.shuffle(pick);
    return pick;
}

}  // namespace

CohortPlan plan_cohort(const CohortSpec& spec, const PhenotypeSpec& phenotype,
                       const PhantomParams& params, const MapGeometry& geometry, std::uint64_t seed) {
    spec.validate();
    phenotype.validate();
    params.validate();
    geometry.validate();

    CohortPlan plan;
    plan.seed = seed;

    for (Group group : {Group::normal, Group::pg}) {
        const bool is_normal = group == Group::normal;
        const int n_subjects = is_normal ? spec.n_normal_subjects : spec.n_pg_subjects;
        const auto& gp = phenotype.of(group);
        Rng group_rng(derive_seed(seed, {tag_group, is_normal ? 0ULL : 1ULL}));

        const auto single_eye = exact_selection(static_cast<std::size_t>(n_subjects),
                                                is_normal ? spec.normal_single_eye_fraction : spec.pg_single_eye_fraction,
                                                group_rng);
        const auto female = exact_selection(static_cast<std::size_t>(n_subjects), gp[Field::female].mean, group_rng);

        const std::size_t first_eye = plan.eyes.size();
        std::vector<double> subject_age(static_cast<std::size_t>(n_subjects));
        std::vector<std::pair<std::size_t, std::size_t>> subject_eyes;  // [begin, end) in plan.eyes
        std::vector<double> nflr(0);

        for (int s = 0; s < n_subjects; ++s) {
            const auto key = subject_key(group, s + 1);
            Rng subject_rng(derive_seed(seed, {tag_subject, key}));
            char id[16];
            std::snprintf(id, sizeof id, "%s%03d", is_normal ? "N" : "G", s + 1);

            std::vector<Eye> eyes{Eye::od, Eye::os};
            if (single_eye[static_cast<std::size_t>(s)]) eyes = {subject_rng.uniform() < 0.5 ? Eye::od : Eye::os};

            const std::size_t begin = plan.eyes.size();
            for (Eye e : eyes) {
                Rng eye_rng(derive_seed(seed, {tag_eye, key, static_cast<std::uint64_t>(e)}));
                auto draw = sample_clinical(group, phenotype, eye_rng);
                PlannedEye pe;
                pe.model.record = draw.record;
                pe.model.record.subject_id = id;
                pe.model.record.eye = e;
                pe.model.record.gender = female[static_cast<std::size_t>(s)];
                pe.model.nflr_target_db = draw.nflr_target_db;
                pe.model.anatomy = draw_anatomy(params, eye_rng);
                pe.model.vessels = draw_vessels(params, eye_rng);
                plan.eyes.push_back(std::move(pe));
            }
            subject_age[static_cast<std::size_t>(s)] = plan.eyes[begin].model.record.age;
            subject_eyes.emplace_back(begin, plan.eyes.size());
        }

        if (spec.moment_match) {
            std::vector<double*> ages;
            for (auto& a : subject_age) ages.push_back(&a);
            match_moments(ages, gp[Field::age].mean, gp[Field::age].sd);
            for (std::size_t i = 0; i < field_count; ++i) {
                const auto f = static_cast<Field>(i);
                if (f == Field::age || f == Field::female) continue;
                std::vector<double> buf;
                buf.reserve(plan.eyes.size() - first_eye);
                for (std::size_t e = first_eye; e < plan.eyes.size(); ++e) {
                    buf.push_back(load_field(plan.eyes[e].model.record, plan.eyes[e].model.nflr_target_db, f));
                }
                std::vector<double*> ptrs;
                for (auto& v : buf) ptrs.push_back(&v);
                match_moments(ptrs, gp[f].mean, gp[f].sd);
                for (std::size_t e = first_eye; e < plan.eyes.size(); ++e) {
                    auto& m = plan.eyes[e].model;
                    store_field(m.record, m.nflr_target_db, f, std::clamp(buf[e - first_eye], gp[f].lo, gp[f].hi));
                }
            }
        }
        for (std::size_t s = 0; s < subject_eyes.size(); ++s) {
            for (std::size_t e = subject_eyes[s].first; e < subject_eyes[s].second; ++e) {
                auto& r = plan.eyes[e].model.record;
                r.age = std::clamp(subject_age[s], gp[Field::age].lo, gp[Field::age].hi);
                r.rim_area = std::min(r.rim_area, r.disc_area);
            }
        }

        const auto three_scans = exact_selection(plan.eyes.size() - first_eye,
                                                 is_normal ? spec.normal_three_scan_fraction : spec.pg_three_scan_fraction,
                                                 group_rng);
        for (std::size_t e = first_eye; e < plan.eyes.size(); ++e) {
            auto& pe = plan.eyes[e];
            const std::uint64_t key = subject_key(group, std::stoi(pe.model.record.subject_id.substr(1)));
            const auto eye_key = static_cast<std::uint64_t>(pe.model.record.eye);
            pe.model.severity = severity_of(pe.model.record, phenotype);
            if (group == Group::pg) {
                Rng defect_rng(derive_seed(seed, {tag_defects, key, eye_key}));
                pe.model.defects = draw_defects(pe.model.severity, geometry, params, defect_rng);
            }
            const int n_scans = three_scans[e - first_eye] ? 3 : 2;
            for (int sc = 1; sc <= n_scans; ++sc) {
                Rng cond_rng(derive_seed(seed, {tag_scan_conditions, key, eye_key, static_cast<std::uint64_t>(sc)}));
                pe.scans.push_back({sc, draw_scan_conditions(params, cond_rng)});
            }
        }
    }
    return plan;
}

SyntheticEye render_scan(const CohortPlan& plan, std::size_t eye_index, std::size_t scan_number,
                         const MapGeometry& geometry, const PhantomParams& params) {
    const auto& pe = plan.eyes.at(eye_index);
    const auto& scan = pe.scans.at(scan_number);
    const auto& rec = pe.model.record;
    const std::uint64_t key = subject_key(rec.group, std::stoi(rec.subject_id.substr(1)));
    Rng noise_rng(derive_seed(plan.seed, {tag_scan_noise, key, static_cast<std::uint64_t>(rec.eye),
                                          static_cast<std::uint64_t>(scan.scan_index)}));
    auto eye = synth_maps(pe.model, scan.conditions, geometry, params, noise_rng);
    eye.record.scan_index = scan.scan_index;
    return eye;
}

}  // namespace nflr
