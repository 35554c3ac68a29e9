#pragma once

// Peripapillary NFL map construction and reduction: ring interpolation,
// PPEC normalization, vessel-shadow inpainting, re-centering, annulus
// masking, first-harmonic azimuthal filtering and superpixel reduction.
//
// Angles are measured counter-clockwise from temporal; the superior
// hemifield is [0, pi) and the inferior hemifield [pi, 2 pi). Angle column j
// of an n-column map sits at theta = 2 pi j / n.

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "nflr/grid.hpp"

namespace nflr {

enum class MapKind { raw_reflectance, reflectance_db, thickness_um };

std::string to_string(MapKind kind);
MapKind map_kind_from_string(const std::string& s);
const char* units_of(MapKind kind);

struct RingProfileSet {
    std::vector<double> ring_diameters;  // mm, strictly increasing
    Grid2D<double> nfl_band_sum;         // [ring x angle]
    Grid2D<double> ppec_band_mean;       // [ring x angle]
    Grid2D<double> nfl_thickness;        // [ring x angle], um

    std::size_t n_rings() const noexcept { return ring_diameters.size(); }
    std::size_t n_angles() const noexcept { return nfl_thickness.cols(); }
    std::vector<double> ring_radii() const;

    // Throws Error(validation) when an invariant does not hold.
    void validate() const;
};

enum class RingBand { nfl_band_sum, ppec_band_mean, nfl_thickness };

struct PolarMap {
    Grid2D<double> values;       // [radius x angle]
    std::vector<double> radii;   // mm per row
    MapKind kind = MapKind::thickness_um;
    Grid2D<std::uint8_t> valid;  // 1 where values are meaningful

    std::size_t n_radii() const noexcept { return values.rows(); }
    std::size_t n_angles() const noexcept { return values.cols(); }
    double angle(std::size_t col) const;
    std::size_t valid_count() const;
    double masked_mean() const;
};

struct VesselMask {
    Grid2D<std::uint8_t> shadowed;  // [radius x angle]
};

struct AnnulusSpec {
    double inner_diameter = 2.1;  // mm
    double outer_diameter = 4.2;  // mm

    double inner_radius() const noexcept { return inner_diameter / 2.0; }
    double outer_radius() const noexcept { return outer_diameter / 2.0; }
    void validate() const;
};

enum class TrajectoryKind { radial, arcuate };

// Track through seed angle theta0 at the inner annulus radius sits at
// theta0 + beta * s * t at normalized annulus depth t in [0, 1], with s = +1
// in the superior hemifield and -1 in the inferior one. The hemifield is
// taken from the pixel angle, so the pixel-to-track map is a partition of
// the annulus for every beta.
struct TrajectoryModel {
    TrajectoryKind kind = TrajectoryKind::arcuate;
    double curvature = 0.35;  // beta, radians of drift across the annulus

    double effective_curvature() const noexcept {
        return kind == TrajectoryKind::radial ? 0.0 : curvature;
    }
    // Seed angle in [0, 2 pi) of the track passing through (t, theta).
    double seed_angle(double t, double theta) const;
    // Angle of the track seeded at theta0 at depth t (forward model).
    double track_angle(double t, double theta0) const;
};

// Continuous (track, segment) coordinates of a point; both are in units of
// cells. Segment coordinate may lie outside [0, n_segments) when the radius
// is outside the annulus.
struct CellCoordinate {
    double track = 0.0;
    double segment = 0.0;
};

CellCoordinate cell_coordinate(double radius, double theta, const TrajectoryModel& trajectory,
                               const AnnulusSpec& annulus, std::size_t n_tracks,
                               std::size_t n_segments);

struct SuperpixelGrid {
    // Stored radius-major: row = segment (radial), column = track (angular).
    Grid2D<double> values;         // NaN in empty cells
    Grid2D<std::uint32_t> counts;  // valid pixels per cell
    MapKind kind = MapKind::thickness_um;

    std::size_t n_segments() const noexcept { return values.rows(); }
    std::size_t n_tracks() const noexcept { return values.cols(); }
    bool empty_cell(std::size_t segment, std::size_t track) const {
        return counts(segment, track) == 0;
    }
    std::uint64_t total_count() const;
};

struct NormativeGrid {
    Grid2D<double> mean;
    Grid2D<double> sd;
    Grid2D<double> cutoff;  // 5th percentile of the normal cohort per cell
};

// ---------------------------------------------------------------------------
// Operations

PolarMap interpolate_polar_map(const RingProfileSet& profiles, RingBand band,
                               std::span<const double> target_radii);

// 10 log10(nfl_sum / ppec_mean) at every pixel valid in both inputs.
PolarMap normalize_reflectance(const PolarMap& nfl_sum, const PolarMap& ppec_mean);

// A dense pixel is shadowed when either ring it is interpolated from is.
VesselMask expand_ring_mask(const Grid2D<std::uint8_t>& ring_mask, std::span<const double> ring_radii,
                            std::span<const double> dense_radii);

PolarMap inpaint_vessels(const PolarMap& map, const VesselMask& mask);

// Resample the map about a shifted origin: output(r, theta) is the source at
// r * u(theta) - offset. |offset| must be below the inner annulus radius.
PolarMap recenter_map(const PolarMap& map, std::pair<double, double> disc_offset,
                      const AnnulusSpec& annulus = {});

PolarMap apply_annulus(const PolarMap& map, const AnnulusSpec& annulus);

// Removes the k = +1 and k = -1 angular Fourier components from every row.
PolarMap azimuthal_filter(const PolarMap& map);

SuperpixelGrid to_superpixels(const PolarMap& map, const TrajectoryModel& trajectory,
                              std::size_t n_tracks, std::size_t n_segments,
                              const AnnulusSpec& annulus);

double grid_average(const SuperpixelGrid& grid);

enum class FlvKind { thickness, reflectance_db };

// Mean signed deficit below the cutoff over nonempty cells that have a
// normative value.
double focal_loss_volume(const SuperpixelGrid& grid, const NormativeGrid& norm, FlvKind kind);

// Cellwise mean, SD and 5th percentile over a normal cohort. Cells empty in
// every grid are NaN.
NormativeGrid fit_normative(std::span<const SuperpixelGrid> normals);

// Uniformly spaced radii covering [r0, r1] inclusive.
std::vector<double> linspace(double r0, double r1, std::size_t n);

// Pipeline parameters shared by the generator and the map stage.
struct MapGeometry {
    std::size_t n_rings = 13;
    double ring_min_diameter = 1.3;  // mm
    double ring_max_diameter = 4.9;  // mm
    std::size_t n_radii = 141;
    std::size_t n_angles = 256;
    AnnulusSpec annulus;
    TrajectoryModel trajectory;
    std::size_t n_tracks = 32;
    std::size_t n_segments = 32;

    std::vector<double> ring_diameters() const;
    std::vector<double> dense_radii() const;
    void validate() const;
};

struct ProcessedScan {
    SuperpixelGrid thickness;
    SuperpixelGrid reflectance;
};

// interpolate -> normalize -> inpaint -> recenter -> annulus -> azimuthal
// filter -> superpixels, for both the thickness and the reflectance map.
ProcessedScan process_scan(const RingProfileSet& profiles, const VesselMask& mask,
                           std::pair<double, double> disc_offset, const MapGeometry& geometry);

// The dense reflectance map just before superpixel reduction; `filtered`
// selects whether the azimuthal filter is applied.
PolarMap processed_reflectance_map(const RingProfileSet& profiles, const VesselMask& mask,
                                   std::pair<double, double> disc_offset,
                                   const MapGeometry& geometry, bool filtered);

}  // namespace nflr
