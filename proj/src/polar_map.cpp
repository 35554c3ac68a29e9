#include "nflr/polar_map.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <sstream>

#include "nflr/error.hpp"

namespace nflr {

namespace {

constexpr double two_pi = 2.0 * std::numbers::pi;
constexpr double radius_tol = 1e-9;

double wrap_angle(double a) {
    a = std::fmod(a, two_pi);
    if (a < 0.0) a += two_pi;
    if (a >= two_pi) a -= two_pi;
    return a;
}

void require_increasing(std::span<const double> xs, const char* what) {
    for (std::size_t i = 1; i < xs.size(); ++i) {
        if (!(xs[i] > xs[i - 1])) {
            throw Error(ErrorKind::validation, std::string(what) + " must be strictly increasing");
        }
    }
}

// Index k such that xs[k] <= x <= xs[k + 1]; x must lie in [xs.front(), xs.back()].
std::size_t bracket(std::span<const double> xs, double x) {
    auto it = std::upper_bound(xs.begin(), xs.end(), x);
    auto k = static_cast<std::size_t>(std::distance(xs.begin(), it));
    if (k == 0) return 0;
    k -= 1;
    return std::min(k, xs.size() - 2);
}

std::string pixel_name(std::size_t r, std::size_t c) {
    std::ostringstream os;
    os << "pixel (radius index " << r << ", angle index " << c << ")";
    return os.str();
}

// Fill the cells of a circular row where `hole` is set by linear
// interpolation between the nearest unmasked neighbors on either side.
// Returns false when every cell is a hole.
bool fill_circular_row(std::span<double> row, auto&& hole) {
    const std::size_t n = row.size();
    std::size_t first_good = n;
    for (std::size_t j = 0; j < n; ++j) {
        if (!hole(j)) {
            first_good = j;
            break;
        }
    }
    if (first_good == n) return false;

    // Walk once around the circle starting at a good cell.
    std::size_t left = first_good;
    for (std::size_t step = 1; step <= n; ++step) {
        const std::size_t j = (first_good + step) % n;
        if (hole(j)) continue;
        const std::size_t gap = (j + n - left) % n == 0 ? n : (j + n - left) % n;
        if (gap > 1) {
            const double a = row[left];
            const double b = row[j];
            for (std::size_t d = 1; d < gap; ++d) {
                const double w = static_cast<double>(d) / static_cast<double>(gap);
                row[(left + d) % n] = (1.0 - w) * a + w * b;
            }
        }
        left = j;
    }
    return true;
}

}  // namespace

std::string to_string(MapKind kind) {
    switch (kind) {
    case MapKind::raw_reflectance: return "raw_reflectance";
    case MapKind::reflectance_db: return "reflectance_db";
    case MapKind::thickness_um: return "thickness_um";
    }
    return "unknown";
}

MapKind map_kind_from_string(const std::string& s) {
    if (s == "raw_reflectance") return MapKind::raw_reflectance;
    if (s == "reflectance_db") return MapKind::reflectance_db;
    if (s == "thickness_um") return MapKind::thickness_um;
    throw Error(ErrorKind::validation, "unknown map kind '" + s + "'");
}

const char* units_of(MapKind kind) {
    switch (kind) {
    case MapKind::raw_reflectance: return "arbitrary";
    case MapKind::reflectance_db: return "dB";
    case MapKind::thickness_um: return "um";
    }
    return "";
}

std::vector<double> RingProfileSet::ring_radii() const {
    std::vector<double> r(ring_diameters.size());
    std::transform(ring_diameters.begin(), ring_diameters.end(), r.begin(),
                   [](double d) { return d / 2.0; });
    return r;
}

void RingProfileSet::validate() const {
    if (n_rings() < 2) throw Error(ErrorKind::validation, "at least 2 rings are required");
    require_increasing(ring_diameters, "ring diameters");
    for (const auto* band : {&nfl_band_sum, &ppec_band_mean, &nfl_thickness}) {
        if (band->rows() != n_rings() || band->cols() != n_angles() || n_angles() == 0) {
            throw Error(ErrorKind::validation, "ring profiles must share n_rings x n_angles");
        }
    }
    for (std::size_t k = 0; k < n_rings(); ++k) {
        for (std::size_t j = 0; j < n_angles(); ++j) {
            if (!(ppec_band_mean(k, j) > 0.0)) {
                throw Error(ErrorKind::validation, "ppec_band_mean must be positive (ring " +
                                                       std::to_string(k) + ", angle " +
                                                       std::to_string(j) + ")");
            }
        }
    }
}

double PolarMap::angle(std::size_t col) const {
    return two_pi * static_cast<double>(col) / static_cast<double>(n_angles());
}

std::size_t PolarMap::valid_count() const {
    return static_cast<std::size_t>(std::count(valid.data().begin(), valid.data().end(), 1));
}

double PolarMap::masked_mean() const {
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < values.size(); ++i) {
        if (valid.data()[i]) {
            sum += values.data()[i];
            ++n;
        }
    }
    if (n == 0) throw Error(ErrorKind::empty_grid, "map has no valid pixels");
    return sum / static_cast<double>(n);
}

void AnnulusSpec::validate() const {
    if (!(inner_diameter > 0.0 && inner_diameter < outer_diameter)) {
        throw Error(ErrorKind::config, "annulus requires 0 < inner_diameter < outer_diameter");
    }
}

double TrajectoryModel::seed_angle(double t, double theta) const {
    theta = wrap_angle(theta);
    const double s = theta < std::numbers::pi ? 1.0 : -1.0;
    return wrap_angle(theta - effective_curvature() * s * t);
}

double TrajectoryModel::track_angle(double t, double theta0) const {
    theta0 = wrap_angle(theta0);
    const double s = theta0 < std::numbers::pi ? 1.0 : -1.0;
    return wrap_angle(theta0 + effective_curvature() * s * t);
}

CellCoordinate cell_coordinate(double radius, double theta, const TrajectoryModel& trajectory,
                               const AnnulusSpec& annulus, std::size_t n_tracks,
                               std::size_t n_segments) {
    const double r_in = annulus.inner_radius();
    const double r_out = annulus.outer_radius();
    const double t = (radius - r_in) / (r_out - r_in);
    const double t_clamped = std::clamp(t, 0.0, 1.0);
    const double theta0 = trajectory.seed_angle(t_clamped, theta);
    return {theta0 / two_pi * static_cast<double>(n_tracks), t * static_cast<double>(n_segments)};
}

std::uint64_t SuperpixelGrid::total_count() const {
    std::uint64_t n = 0;
    for (auto c : counts.data()) n += c;
    return n;
}

// ---------------------------------------------------------------------------

PolarMap interpolate_polar_map(const RingProfileSet& profiles, RingBand band,
                               std::span<const double> target_radii) {
    profiles.validate();
    require_increasing(target_radii, "target radii");
    const auto ring_r = profiles.ring_radii();
    const Grid2D<double>& src = band == RingBand::nfl_band_sum     ? profiles.nfl_band_sum
                                : band == RingBand::ppec_band_mean ? profiles.ppec_band_mean
                                                                   : profiles.nfl_thickness;
    const std::size_t n_ang = profiles.n_angles();

    PolarMap out;
    out.kind = band == RingBand::nfl_thickness ? MapKind::thickness_um : MapKind::raw_reflectance;
    out.radii.assign(target_radii.begin(), target_radii.end());
    out.values = Grid2D<double>(target_radii.size(), n_ang);
    out.valid = Grid2D<std::uint8_t>(target_radii.size(), n_ang, 1);

    for (std::size_t i = 0; i < target_radii.size(); ++i) {
        const double r = target_radii[i];
        if (r < ring_r.front() - radius_tol || r > ring_r.back() + radius_tol) {
            std::ostringstream os;
            os << "target radius " << r << " mm outside ring span [" << ring_r.front() << ", "
               << ring_r.back() << "] mm";
            throw Error(ErrorKind::out_of_range, os.str());
        }
        const std::size_t k = bracket(ring_r, std::clamp(r, ring_r.front(), ring_r.back()));
        const double w = std::clamp((r - ring_r[k]) / (ring_r[k + 1] - ring_r[k]), 0.0, 1.0);
        auto lo = src.row(k);
        auto hi = src.row(k + 1);
        auto dst = out.values.row(i);
        if (w == 0.0) {
            std::copy(lo.begin(), lo.end(), dst.begin());
        } else if (w == 1.0) {
            std::copy(hi.begin(), hi.end(), dst.begin());
        } else {
            for (std::size_t j = 0; j < n_ang; ++j) dst[j] = (1.0 - w) * lo[j] + w * hi[j];
        }
    }
    return out;
}

PolarMap normalize_reflectance(const PolarMap& nfl_sum, const PolarMap& ppec_mean) {
    if (!nfl_sum.values.same_shape(ppec_mean.values)) {
        throw Error(ErrorKind::validation, "nfl_sum and ppec_mean dimensions differ");
    }
    PolarMap out = nfl_sum;
    out.kind = MapKind::reflectance_db;
    for (std::size_t i = 0; i < out.n_radii(); ++i) {
        for (std::size_t j = 0; j < out.n_angles(); ++j) {
            const bool v = nfl_sum.valid(i, j) && ppec_mean.valid(i, j);
            out.valid(i, j) = v;
            if (!v) continue;
            const double num = nfl_sum.values(i, j);
            const double den = ppec_mean.values(i, j);
            if (!(den > 0.0)) {
                throw Error(ErrorKind::domain, "nonpositive ppec_mean at " + pixel_name(i, j));
            }
            if (!(num > 0.0)) {
                throw Error(ErrorKind::domain, "nonpositive nfl_sum at " + pixel_name(i, j));
            }
            out.values(i, j) = 10.0 * std::log10(num / den);
        }
    }
    return out;
}

VesselMask expand_ring_mask(const Grid2D<std::uint8_t>& ring_mask, std::span<const double> ring_radii,
                            std::span<const double> dense_radii) {
    const std::size_t nr = ring_radii.size();
    if (nr < 2 || ring_mask.rows() != nr) throw Error(ErrorKind::config, "ring mask does not match the ring count");
    const std::size_t na = ring_mask.cols();
    VesselMask out{Grid2D<std::uint8_t>(dense_radii.size(), na, 0)};
    for (std::size_t i = 0; i < dense_radii.size(); ++i) {
        const std::size_t k = std::min(bracket(ring_radii, dense_radii[i]), nr - 2);
        const double w = (dense_radii[i] - ring_radii[k]) / (ring_radii[k + 1] - ring_radii[k]);
        for (std::size_t j = 0; j < na; ++j) {
            const bool lo = w < 1.0 && ring_mask(k, j);
            const bool hi = w > 0.0 && ring_mask(k + 1, j);
            out.shadowed(i, j) = lo || hi;
        }
    }
    return out;
}

PolarMap inpaint_vessels(const PolarMap& map, const VesselMask& mask) {
    if (!map.values.same_shape(mask.shadowed)) {
        throw Error(ErrorKind::validation, "vessel mask dimensions differ from the map");
    }
    PolarMap out = map;
    const std::size_t nr = map.n_radii();
    std::vector<std::uint8_t> row_ok(nr, 0);
    for (std::size_t i = 0; i < nr; ++i) {
        auto shadow = mask.shadowed.row(i);
        row_ok[i] = fill_circular_row(out.values.row(i), [&](std::size_t j) { return shadow[j] != 0; });
    }
    if (std::none_of(row_ok.begin(), row_ok.end(), [](auto b) { return b != 0; })) {
        throw Error(ErrorKind::unrecoverable_mask, "every pixel of the map is shadowed");
    }
    // Fully shadowed rows: interpolate radially between the nearest usable rows.
    for (std::size_t i = 0; i < nr; ++i) {
        if (row_ok[i]) continue;
        std::ptrdiff_t below = static_cast<std::ptrdiff_t>(i) - 1;
        while (below >= 0 && !row_ok[static_cast<std::size_t>(below)]) --below;
        std::size_t above = i + 1;
        while (above < nr && !row_ok[above]) ++above;
        auto dst = out.values.row(i);
        if (below >= 0 && above < nr) {
            const auto b = static_cast<std::size_t>(below);
            const double w = (map.radii[i] - map.radii[b]) / (map.radii[above] - map.radii[b]);
            auto lo = out.values.row(b);
            auto hi = out.values.row(above);
            for (std::size_t j = 0; j < dst.size(); ++j) dst[j] = (1.0 - w) * lo[j] + w * hi[j];
        } else {
            const std::size_t src = below >= 0 ? static_cast<std::size_t>(below) : above;
            auto s = out.values.row(src);
            std::copy(s.begin(), s.end(), dst.begin());
        }
    }
    return out;
}

PolarMap recenter_map(const PolarMap& map, std::pair<double, double> disc_offset,
                      const AnnulusSpec& annulus) {
    const auto [dx, dy] = disc_offset;
    if (!(std::hypot(dx, dy) < annulus.inner_radius())) {
        throw Error(ErrorKind::out_of_range, "disc offset must be smaller than the inner annulus radius");
    }
    if (dx == 0.0 && dy == 0.0) return map;

    const std::size_t nr = map.n_radii();
    const std::size_t na = map.n_angles();
    const double r_min = map.radii.front();
    const double r_max = map.radii.back();

    PolarMap out = map;
    for (std::size_t i = 0; i < nr; ++i) {
        for (std::size_t j = 0; j < na; ++j) {
            const double theta = map.angle(j);
            const double x = map.radii[i] * std::cos(theta) - dx;
            const double y = map.radii[i] * std::sin(theta) - dy;
            const double rho = std::hypot(x, y);
            out.values(i, j) = 0.0;
            out.valid(i, j) = 0;
            if (rho < r_min || rho > r_max || nr < 2) continue;

            const std::size_t k = bracket(map.radii, rho);
            const double wr = (rho - map.radii[k]) / (map.radii[k + 1] - map.radii[k]);
            const double pos = wrap_angle(std::atan2(y, x)) / two_pi * static_cast<double>(na);
            const auto j0 = static_cast<std::size_t>(std::floor(pos)) % na;
            const std::size_t j1 = (j0 + 1) % na;
            const double wa = pos - std::floor(pos);

            if (!(map.valid(k, j0) && map.valid(k, j1) && map.valid(k + 1, j0) && map.valid(k + 1, j1))) {
                continue;
            }
            const double lo = (1.0 - wa) * map.values(k, j0) + wa * map.values(k, j1);
            const double hi = (1.0 - wa) * map.values(k + 1, j0) + wa * map.values(k + 1, j1);
            out.values(i, j) = (1.0 - wr) * lo + wr * hi;
            out.valid(i, j) = 1;
        }
    }
    return out;
}

PolarMap apply_annulus(const PolarMap& map, const AnnulusSpec& annulus) {
    annulus.validate();
    if (annulus.inner_radius() < map.radii.front() - radius_tol ||
        annulus.outer_radius() > map.radii.back() + radius_tol) {
        throw Error(ErrorKind::out_of_range, "annulus extends beyond the map's radial span");
    }
    PolarMap out = map;
    for (std::size_t i = 0; i < map.n_radii(); ++i) {
        const double r = map.radii[i];
        if (r >= annulus.inner_radius() && r <= annulus.outer_radius()) continue;
        auto v = out.valid.row(i);
        std::fill(v.begin(), v.end(), std::uint8_t{0});
    }
    return out;
}

PolarMap azimuthal_filter(const PolarMap& map) {
    const std::size_t na = map.n_angles();
    if (na < 4) throw Error(ErrorKind::config, "azimuthal filter needs at least 4 angle samples");

    std::vector<double> cos_t(na), sin_t(na);
    for (std::size_t j = 0; j < na; ++j) {
        cos_t[j] = std::cos(map.angle(j));
        sin_t[j] = std::sin(map.angle(j));
    }

    PolarMap out = map;
    std::vector<double> work(na);
    for (std::size_t i = 0; i < map.n_radii(); ++i) {
        auto valid = map.valid.row(i);
        const auto n_valid = static_cast<std::size_t>(std::count(valid.begin(), valid.end(), 1));
        if (n_valid == 0) continue;
        if (n_valid < 4) {
            throw Error(ErrorKind::insufficient_data,
                        "radius row " + std::to_string(i) + " has fewer than 4 valid samples");
        }
        auto src = map.values.row(i);
        std::copy(src.begin(), src.end(), work.begin());
        if (n_valid < na) fill_circular_row(std::span<double>(work), [&](std::size_t j) { return valid[j] == 0; });

        // Zeroing DFT bins +1 and -1 and inverting is the same as
        // subtracting the row's projection on cos/sin of the fundamental.
        double a = 0.0, b = 0.0;
        for (std::size_t j = 0; j < na; ++j) {
            a += work[j] * cos_t[j];
            b += work[j] * sin_t[j];
        }
        a *= 2.0 / static_cast<double>(na);
        b *= 2.0 / static_cast<double>(na);
        auto dst = out.values.row(i);
        for (std::size_t j = 0; j < na; ++j) {
            if (valid[j]) dst[j] = work[j] - (a * cos_t[j] + b * sin_t[j]);
        }
    }
    return out;
}

namespace {

// Pixel centres often sit exactly on a cell edge (256 angles over 32
// tracks); rounding must not push them into the lower cell.
std::size_t cell_index(double x) {
    return static_cast<std::size_t>(std::floor(x + 1e-9));
}

}  // namespace

SuperpixelGrid to_superpixels(const PolarMap& map, const TrajectoryModel& trajectory,
                              std::size_t n_tracks, std::size_t n_segments,
                              const AnnulusSpec& annulus) {
    if (n_tracks < 1 || n_segments < 1) {
        throw Error(ErrorKind::config, "n_tracks and n_segments must be at least 1");
    }
    annulus.validate();
    const double r_in = annulus.inner_radius();
    const double r_out = annulus.outer_radius();

    Grid2D<double> sums(n_segments, n_tracks, 0.0);
    SuperpixelGrid grid;
    grid.kind = map.kind;
    grid.counts = Grid2D<std::uint32_t>(n_segments, n_tracks, 0);

    for (std::size_t i = 0; i < map.n_radii(); ++i) {
        const double r = map.radii[i];
        if (r < r_in || r > r_out) continue;
        const double t = (r - r_in) / (r_out - r_in);
        const auto seg = std::min(cell_index(t * static_cast<double>(n_segments)), n_segments - 1);
        for (std::size_t j = 0; j < map.n_angles(); ++j) {
            if (!map.valid(i, j)) continue;
            const double theta0 = trajectory.seed_angle(t, map.angle(j));
            const auto track = cell_index(theta0 / two_pi * static_cast<double>(n_tracks)) % n_tracks;
            sums(seg, track) += map.values(i, j);
            grid.counts(seg, track) += 1;
        }
    }

    grid.values = Grid2D<double>(n_segments, n_tracks, std::numeric_limits<double>::quiet_NaN());
    for (std::size_t s = 0; s < n_segments; ++s) {
        for (std::size_t k = 0; k < n_tracks; ++k) {
            if (grid.counts(s, k) > 0) grid.values(s, k) = sums(s, k) / grid.counts(s, k);
        }
    }
    return grid;
}

double grid_average(const SuperpixelGrid& grid) {
    double sum = 0.0;
    std::uint64_t n = 0;
    for (std::size_t i = 0; i < grid.values.size(); ++i) {
        const auto c = grid.counts.data()[i];
        if (c == 0) continue;
        sum += static_cast<double>(c) * grid.values.data()[i];
        n += c;
    }
    if (n == 0) throw Error(ErrorKind::empty_grid, "superpixel grid has no nonempty cells");
    return sum / static_cast<double>(n);
}

double focal_loss_volume(const SuperpixelGrid& grid, const NormativeGrid& norm, FlvKind kind) {
    if (!grid.values.same_shape(norm.mean) || !grid.values.same_shape(norm.cutoff)) {
        throw Error(ErrorKind::validation, "grid and normative dimensions differ");
    }
    double total = 0.0;
    std::size_t cells = 0;
    for (std::size_t i = 0; i < grid.values.size(); ++i) {
        if (grid.counts.data()[i] == 0) continue;
        const double v = grid.values.data()[i];
        const double mu = norm.mean.data()[i];
        if (std::isnan(mu)) continue;
        if (kind == FlvKind::thickness && !(mu > 0.0)) {
            throw Error(ErrorKind::domain, "normative mean must be positive for thickness FLV (cell " +
                                               std::to_string(i) + ")");
        }
        ++cells;
        if (!(v < norm.cutoff.data()[i])) continue;
        total += kind == FlvKind::thickness ? -(v - mu) / mu : v - mu;
    }
    if (cells == 0) throw Error(ErrorKind::empty_grid, "superpixel grid has no nonempty cells");
    const double scale = kind == FlvKind::thickness ? 100.0 : 1.0;
    return scale * total / static_cast<double>(cells);
}

NormativeGrid fit_normative(std::span<const SuperpixelGrid> normals) {
    if (normals.empty()) throw Error(ErrorKind::insufficient_data, "normative fit needs at least one grid");
    const std::size_t rows = normals.front().values.rows();
    const std::size_t cols = normals.front().values.cols();
    NormativeGrid norm{Grid2D<double>(rows, cols), Grid2D<double>(rows, cols), Grid2D<double>(rows, cols)};
    std::vector<double> sample;
    std::size_t populated = 0;
    for (std::size_t c = 0; c < rows * cols; ++c) {
        sample.clear();
        for (const auto& g : normals) {
            if (!g.values.same_shape(norm.mean)) {
                throw Error(ErrorKind::validation, "normative grids have mismatched dimensions");
            }
            if (g.counts.data()[c] > 0) sample.push_back(g.values.data()[c]);
        }
        if (sample.empty()) {
            // Cells the trajectory never reaches stay without a normative.
            const double nan = std::numeric_limits<double>::quiet_NaN();
            norm.mean.data()[c] = norm.sd.data()[c] = norm.cutoff.data()[c] = nan;
            continue;
        }
        ++populated;
        double mean = 0.0;
        for (double v : sample) mean += v;
        mean /= static_cast<double>(sample.size());
        double ss = 0.0;
        for (double v : sample) ss += (v - mean) * (v - mean);
        const double sd = sample.size() > 1 ? std::sqrt(ss / static_cast<double>(sample.size() - 1)) : 0.0;

        // Linear-interpolation quantile (type 7).
        std::sort(sample.begin(), sample.end());
        const double h = 0.05 * static_cast<double>(sample.size() - 1);
        const auto lo = static_cast<std::size_t>(std::floor(h));
        const std::size_t hi = std::min(lo + 1, sample.size() - 1);
        const double q = sample[lo] + (h - static_cast<double>(lo)) * (sample[hi] - sample[lo]);

        norm.mean.data()[c] = mean;
        norm.sd.data()[c] = sd;
        norm.cutoff.data()[c] = std::min(q, mean);
    }
    if (populated == 0) throw Error(ErrorKind::insufficient_data, "every normative cell is empty");
    return norm;
}

std::vector<double> linspace(double r0, double r1, std::size_t n) {
    std::vector<double> out(n);
    if (n == 1) {
        out[0] = r0;
        return out;
    }
    for (std::size_t i = 0; i < n; ++i) {
        out[i] = r0 + (r1 - r0) * static_cast<double>(i) / static_cast<double>(n - 1);
    }
    return out;
}

std::vector<double> MapGeometry::ring_diameters() const {
    return linspace(ring_min_diameter, ring_max_diameter, n_rings);
}

std::vector<double> MapGeometry::dense_radii() const {
    return linspace(ring_min_diameter / 2.0, ring_max_diameter / 2.0, n_radii);
}

void MapGeometry::validate() const {
    if (n_rings < 2) throw Error(ErrorKind::config, "n_rings must be at least 2");
    if (!(ring_min_diameter > 0.0 && ring_min_diameter < ring_max_diameter)) {
        throw Error(ErrorKind::config, "ring diameters must satisfy 0 < min < max");
    }
    if (n_radii < 2) throw Error(ErrorKind::config, "n_radii must be at least 2");
    if (n_angles < 4) throw Error(ErrorKind::config, "n_angles must be at least 4");
    if (n_tracks < 1 || n_segments < 1) throw Error(ErrorKind::config, "grid dimensions must be at least 1");
    if (trajectory.curvature < 0.0) throw Error(ErrorKind::config, "trajectory curvature must be >= 0");
    annulus.validate();
    if (annulus.inner_diameter < ring_min_diameter || annulus.outer_diameter > ring_max_diameter) {
        throw Error(ErrorKind::config, "annulus must lie within the ring span");
    }
}

namespace {

PolarMap dense_reflectance(const RingProfileSet& profiles, const VesselMask& mask,
                           std::pair<double, double> disc_offset, const MapGeometry& geometry) {
    const auto radii = geometry.dense_radii();
    const auto nfl = interpolate_polar_map(profiles, RingBand::nfl_band_sum, radii);
    const auto ppec = interpolate_polar_map(profiles, RingBand::ppec_band_mean, radii);
    auto refl = inpaint_vessels(normalize_reflectance(nfl, ppec), mask);
    refl = recenter_map(refl, disc_offset, geometry.annulus);
    return apply_annulus(refl, geometry.annulus);
}

}  // namespace

PolarMap processed_reflectance_map(const RingProfileSet& profiles, const VesselMask& mask,
                                   std::pair<double, double> disc_offset,
                                   const MapGeometry& geometry, bool filtered) {
    auto m = dense_reflectance(profiles, mask, disc_offset, geometry);
    return filtered ? azimuthal_filter(m) : m;
}

ProcessedScan process_scan(const RingProfileSet& profiles, const VesselMask& mask,
                           std::pair<double, double> disc_offset, const MapGeometry& geometry) {
    geometry.validate();
    const auto radii = geometry.dense_radii();

    auto thick = inpaint_vessels(interpolate_polar_map(profiles, RingBand::nfl_thickness, radii), mask);
    thick = apply_annulus(recenter_map(thick, disc_offset, geometry.annulus), geometry.annulus);

    const auto refl = azimuthal_filter(dense_reflectance(profiles, mask, disc_offset, geometry));

    ProcessedScan out;
    out.thickness = to_superpixels(thick, geometry.trajectory, geometry.n_tracks, geometry.n_segments,
                                   geometry.annulus);
    out.reflectance = to_superpixels(refl, geometry.trajectory, geometry.n_tracks, geometry.n_segments,
                                     geometry.annulus);
    return out;
}

}  // namespace nflr
