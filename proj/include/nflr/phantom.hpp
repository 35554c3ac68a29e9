#pragma once

// Synthetic cohort generator. Produces clinical records whose group
// statistics follow the published normal / perimetric-glaucoma cohort
// characteristics, and ring profiles whose processed maps carry diffuse and
// track-aligned focal loss, vessel shadows, incident-angle bias and noise.

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "nflr/polar_map.hpp"
#include "nflr/rng.hpp"

namespace nflr {

enum class Group { normal, pg };

std::string to_string(Group g);
Group group_from_string(const std::string& s);

enum class Eye { od, os };

std::string to_string(Eye e);
Eye eye_from_string(const std::string& s);

struct EyeRecord {
    std::string subject_id;
    Eye eye = Eye::od;
    int scan_index = 0;
    Group group = Group::normal;
    double age = 0.0;            // years
    int gender = 0;              // 1 = female
    double axial_length = 0.0;   // mm
    double vf_md = 0.0;          // dB
    double disc_area = 0.0;      // mm^2
    double rim_area = 0.0;       // mm^2
    double cd_area_ratio = 0.0;
    double vcdr = 0.0;
    double gcc_sup = 0.0;        // um
    double gcc_inf = 0.0;        // um
    double gcc_flv = 0.0;        // %
    double rnfl_avg = 0.0;       // um
    double rnfl_flv = 0.0;       // %

    void validate() const;
};

// Numeric clinical fields that are drawn from the phenotype.
enum class Field : std::size_t {
    age,
    female,  // Bernoulli probability; sd unused
    axial_length,
    vf_md,
    disc_area,
    rim_area,
    cd_area_ratio,
    vcdr,
    gcc_sup,
    gcc_inf,
    gcc_flv,
    rnfl_avg,
    rnfl_flv,
    nflr_avg,  // map-level reflectance target, dB; not a record field
    count_
};

inline constexpr std::size_t field_count = static_cast<std::size_t>(Field::count_);
const char* field_name(Field f);

struct FieldDistribution {
    double mean = 0.0;
    double sd = 0.0;
    double lo = -1e300;  // truncation bounds
    double hi = 1e300;
};

struct GroupPhenotype {
    std::array<FieldDistribution, field_count> fields{};

    FieldDistribution& operator[](Field f) { return fields[static_cast<std::size_t>(f)]; }
    const FieldDistribution& operator[](Field f) const { return fields[static_cast<std::size_t>(f)]; }
};

struct PhenotypeSpec {
    GroupPhenotype normal;
    GroupPhenotype pg;

    // Published cohort means and SDs.
    static PhenotypeSpec defaults();
    const GroupPhenotype& of(Group g) const { return g == Group::normal ? normal : pg; }
    GroupPhenotype& of(Group g) { return g == Group::normal ? normal : pg; }
    void validate() const;
};

// Whether a field moves with disease severity in the glaucoma group.
bool severity_linked(Field f);

struct ClinicalDraw {
    EyeRecord record;
    double nflr_target_db = 0.0;
};

// Normal group: independent truncated Gaussians. Glaucoma group: vf_md is
// drawn first and its magnitude, relative to the group mean, is the
// severity that shifts every severity-linked field between the normal and
// glaucoma means; a residual Gaussian keeps the published group SD.
ClinicalDraw sample_clinical(Group group, const PhenotypeSpec& phenotype, Rng& rng);

// Severity multiplier in [0, inf), mean one over the glaucoma group; zero
// for normal eyes.
double severity_of(const EyeRecord& record, const PhenotypeSpec& phenotype);

struct DefectSpec {
    int center_track = 0;
    int width_tracks = 1;
    double depth_thickness = 0.0;    // fractional loss in [0, 1]
    double depth_reflectance = 0.0;  // dB drop
    int segment_begin = 0;           // radial extent [begin, end)
    int segment_end = 0;

    void validate(std::size_t n_tracks, std::size_t n_segments) const;
    bool covers_track(int track, std::size_t n_tracks) const;
    bool covers_segment(double segment_coord, std::size_t n_segments) const;
};

struct Vessel {
    double seed_angle = 0.0;  // track seed angle, radians
    double width = 0.1;       // mm
};

// Eye-level anatomy shared by all repeat scans of an eye.
struct EyeAnatomy {
    double rotation = 0.0;         // radians, common shift of both bundles
    double bundle_width = 0.55;    // radians
    double bundle_gain = 0.9;      // bundle peak height relative to baseline
    double decay_length = 1.5;     // mm
    std::array<double, 3> ripple_amp{};    // harmonics 2..4, relative
    std::array<double, 3> ripple_phase{};
    double reflectance_contrast = 1.5;  // dB between bundle and baseline
    double ppec_level = 120.0;
};

struct ScanConditions {
    std::pair<double, double> disc_offset{0.0, 0.0};  // mm
    double bias_amplitude = 0.0;                      // dB
    double bias_phase = 0.0;                          // radians
};

struct PhantomParams {
    double thickness_noise_um = 2.0;
    double reflectance_noise_db = 0.5;
    double max_disc_offset_mm = 0.3;
    double max_bias_db = 3.0;
    int min_vessels = 4;
    int max_vessels = 8;
    double vessel_reflectance_drop_db = 6.0;
    double vessel_thickness_gain_um = 12.0;

    // Normal anatomical variability.
    double rotation_sd = 0.10;
    double bundle_width_mean = 0.55;
    double bundle_width_sd = 0.06;
    double bundle_gain_mean = 0.9;
    double bundle_gain_sd = 0.12;
    double ripple_sd = 0.03;

    // Focal defect size as an affine function of severity.
    double defect_depth_thickness_base = 0.18;
    double defect_depth_thickness_slope = 0.12;
    double defect_depth_reflectance_base = 1.2;
    double defect_depth_reflectance_slope = 1.0;
    double defect_width_base = 2.0;
    double defect_width_slope = 2.0;
    double second_defect_severity = 1.3;
    // Scale a PG eye's baseline so the annulus means after its defects hit
    // the clinical rnfl_avg and NFLR target; otherwise defects come on top.
    bool calibrate_after_defects = true;

    void validate() const;
};

struct EyeModel {
    EyeRecord record;  // scan_index unused
    double nflr_target_db = 0.0;
    double severity = 0.0;
    EyeAnatomy anatomy;
    std::vector<DefectSpec> defects;
    std::vector<Vessel> vessels;
};

struct SyntheticEye {
    EyeRecord record;
    RingProfileSet profiles;
    VesselMask vessel_mask;
    Grid2D<std::uint8_t> ring_vessel_mask;  // [ring x angle]
    std::pair<double, double> disc_offset{0.0, 0.0};
    std::vector<DefectSpec> defects;
    double bias_amplitude = 0.0;
    double bias_phase = 0.0;
};

EyeAnatomy draw_anatomy(const PhantomParams& params, Rng& rng);
std::vector<DefectSpec> draw_defects(double severity, const MapGeometry& geometry,
                                     const PhantomParams& params, Rng& rng);
std::vector<Vessel> draw_vessels(const PhantomParams& params, Rng& rng);
ScanConditions draw_scan_conditions(const PhantomParams& params, Rng& rng);

struct NoiseSwitch {
    bool enabled = true;
};

// Renders one scan. With noise disabled, the processed thickness grid
// average reproduces record.rnfl_avg before defects are carved.
SyntheticEye synth_maps(const EyeModel& eye, const ScanConditions& scan, const MapGeometry& geometry,
                        const PhantomParams& params, Rng& rng, NoiseSwitch noise = {});

struct CohortSpec {
    int n_normal_subjects = 106;
    int n_pg_subjects = 164;
    // Subjects contributing one eye; defaults reproduce 210 and 238 eyes.
    double normal_single_eye_fraction = 2.0 / 106.0;
    double pg_single_eye_fraction = 90.0 / 164.0;
    // Eyes scanned three times instead of twice; defaults reproduce 620 and
    // 671 scans.
    double normal_three_scan_fraction = 200.0 / 210.0;
    double pg_three_scan_fraction = 195.0 / 238.0;
    // Match each clinical field's group sample mean and SD to the phenotype.
    bool moment_match = true;

    void validate() const;
};

struct PlannedScan {
    int scan_index = 0;
    ScanConditions conditions;
};

struct PlannedEye {
    EyeModel model;
    std::vector<PlannedScan> scans;
};

struct CohortPlan {
    std::uint64_t seed = 0;
    std::vector<PlannedEye> eyes;  // subjects in order, OD before OS

    std::size_t scan_count() const;
};

inline constexpr const char* generator_version = "nflr-phantom/1";

CohortPlan plan_cohort(const CohortSpec& spec, const PhenotypeSpec& phenotype,
                       const PhantomParams& params, const MapGeometry& geometry, std::uint64_t seed);

// Per-scan noise substream derived from (seed, subject, eye, scan).
SyntheticEye render_scan(const CohortPlan& plan, std::size_t eye_index, std::size_t scan_number,
                         const MapGeometry& geometry, const PhantomParams& params);

std::string scan_id(const EyeRecord& record, int scan_index);

}  // namespace nflr
