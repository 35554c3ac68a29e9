#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <complex>
#include <numbers>

#include "nflr/error.hpp"
#include "nflr/polar_map.hpp"
#include "nflr/rng.hpp"

using namespace nflr;

namespace {

constexpr double two_pi = 2.0 * std::numbers::pi;

std::complex<double> dft_bin(std::span<const double> row, int k) {
    std::complex<double> acc = 0.0;
    const auto n = static_cast<double>(row.size());
    for (std::size_t j = 0; j < row.size(); ++j) {
        acc += row[j] * std::polar(1.0, -two_pi * k * static_cast<double>(j) / n);
    }
    return acc;
}

PolarMap random_map(Rng& rng, std::size_t nr, std::size_t na, double r0, double r1) {
    PolarMap m;
    m.radii = linspace(r0, r1, nr);
    m.values = Grid2D<double>(nr, na);
    m.valid = Grid2D<std::uint8_t>(nr, na, 1);
    for (auto& v : m.values.data()) v = rng.normal(10.0, 3.0);
    return m;
}

RingProfileSet ramp_profiles(std::size_t na) {
    RingProfileSet p;
    p.ring_diameters = {2.0, 3.0, 4.0};
    p.nfl_band_sum = Grid2D<double>(3, na);
    p.ppec_band_mean = Grid2D<double>(3, na, 100.0);
    p.nfl_thickness = Grid2D<double>(3, na);
    for (std::size_t k = 0; k < 3; ++k) {
        for (std::size_t j = 0; j < na; ++j) {
            p.nfl_thickness(k, j) = 50.0 + 10.0 * static_cast<double>(k) + static_cast<double>(j);
            p.nfl_band_sum(k, j) = 10.0 * (1.0 + static_cast<double>(k));
        }
    }
    return p;
}

}  // namespace

TEST_CASE("interpolation reproduces rings and is linear between them") {
    const auto p = ramp_profiles(8);
    const std::vector<double> radii{1.0, 1.25, 1.5, 2.0};
    const auto m = interpolate_polar_map(p, RingBand::nfl_thickness, radii);
    CHECK(m.kind == MapKind::thickness_um);
    for (std::size_t j = 0; j < 8; ++j) {
        CHECK(m.values(0, j) == p.nfl_thickness(0, j));
        CHECK(m.values(1, j) == doctest::Approx(55.0 + static_cast<double>(j)));
        CHECK(m.values(2, j) == p.nfl_thickness(1, j));
        CHECK(m.values(3, j) == p.nfl_thickness(2, j));
    }
    CHECK_THROWS_AS(interpolate_polar_map(p, RingBand::nfl_thickness, std::vector{0.9, 1.5}), Error);
    auto bad = p;
    bad.ppec_band_mean(1, 2) = 0.0;
    CHECK_THROWS_AS(interpolate_polar_map(bad, RingBand::ppec_band_mean, radii), Error);
}

TEST_CASE("normalization is ten log10 of the ratio") {
    const auto p = ramp_profiles(4);
    const std::vector<double> radii{1.0, 1.5, 2.0};
    const auto nfl = interpolate_polar_map(p, RingBand::nfl_band_sum, radii);
    const auto ppec = interpolate_polar_map(p, RingBand::ppec_band_mean, radii);
    const auto db = normalize_reflectance(nfl, ppec);
    CHECK(db.kind == MapKind::reflectance_db);
    CHECK(db.values(0, 0) == doctest::Approx(-10.0));
    CHECK(db.values(2, 3) == doctest::Approx(10.0 * std::log10(0.3)));
    auto zero = nfl;
    zero.values(1, 1) = 0.0;
    CHECK_THROWS_AS(normalize_reflectance(zero, ppec), Error);
}

TEST_CASE("vessel inpainting interpolates across shadows and leaves clear pixels") {
    PolarMap m;
    m.radii = {1.0, 1.1, 1.2};
    m.values = Grid2D<double>(3, 8);
    m.valid = Grid2D<std::uint8_t>(3, 8, 1);
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t j = 0; j < 8; ++j) m.values(i, j) = static_cast<double>(j);
    }
    VesselMask mask{Grid2D<std::uint8_t>(3, 8, 0)};
    mask.shadowed(0, 3) = mask.shadowed(0, 4) = 1;
    m.values(0, 3) = m.values(0, 4) = -100.0;
    for (std::size_t j = 0; j < 8; ++j) mask.shadowed(1, j) = 1;
    const auto out = inpaint_vessels(m, mask);
    CHECK(out.values(0, 3) == doctest::Approx(3.0));
    CHECK(out.values(0, 4) == doctest::Approx(4.0));
    CHECK(out.values(0, 5) == 5.0);
    for (std::size_t j = 0; j < 8; ++j) CHECK(out.values(1, j) == doctest::Approx(static_cast<double>(j)));

    VesselMask all{Grid2D<std::uint8_t>(3, 8, 1)};
    CHECK_THROWS_AS(inpaint_vessels(m, all), Error);
}

TEST_CASE("ring vessel mask expands to bracketing dense rows") {
    Grid2D<std::uint8_t> ring(3, 4, 0);
    ring(1, 2) = 1;
    const std::vector<double> ring_r{1.0, 2.0, 3.0};
    const std::vector<double> dense{1.0, 1.5, 2.0, 2.5, 3.0};
    const auto m = expand_ring_mask(ring, ring_r, dense);
    CHECK(m.shadowed(0, 2) == 0);
    CHECK(m.shadowed(1, 2) == 1);
    CHECK(m.shadowed(2, 2) == 1);
    CHECK(m.shadowed(3, 2) == 1);
    CHECK(m.shadowed(4, 2) == 0);
    CHECK(m.shadowed(2, 1) == 0);
}

TEST_CASE("recentering") {
    Rng rng(3);
    auto m = random_map(rng, 40, 64, 0.6, 2.4);
    CHECK(recenter_map(m, {0.0, 0.0}).values == m.values);
    CHECK_THROWS_AS(recenter_map(m, {1.2, 0.0}), Error);

    // A field linear in x, y is reproduced up to interpolation error.
    for (std::size_t i = 0; i < m.n_radii(); ++i) {
        for (std::size_t j = 0; j < m.n_angles(); ++j) {
            m.values(i, j) = 3.0 + m.radii[i] * std::cos(m.angle(j));
        }
    }
    const auto shifted = recenter_map(m, {0.2, 0.1});
    std::size_t checked = 0;
    for (std::size_t i = 5; i < 30; ++i) {
        for (std::size_t j = 0; j < m.n_angles(); ++j) {
            if (!shifted.valid(i, j)) continue;
            const double x = m.radii[i] * std::cos(m.angle(j)) - 0.2;
            CHECK(shifted.values(i, j) == doctest::Approx(3.0 + x).epsilon(0.01));
            ++checked;
        }
    }
    CHECK(checked > 1000);
}

TEST_CASE("annulus masks rows outside the band") {
    Rng rng(4);
    const auto m = random_map(rng, 141, 16, 0.65, 2.45);
    const auto a = apply_annulus(m, {});
    for (std::size_t i = 0; i < a.n_radii(); ++i) {
        const bool inside = m.radii[i] >= 1.05 && m.radii[i] <= 2.1;
        CHECK(static_cast<bool>(a.valid(i, 0)) == inside);
    }
    CHECK_THROWS_AS(apply_annulus(m, {2.1, 6.0}), Error);
    CHECK_THROWS_AS(apply_annulus(m, {3.0, 2.0}), Error);
}

TEST_CASE("azimuthal filter removes exactly the first harmonic") {
    Rng rng(5);
    for (int t = 0; t < 20; ++t) {
        const auto m = random_map(rng, 6, 64, 1.0, 2.0);
        const auto f = azimuthal_filter(m);
        for (std::size_t i = 0; i < m.n_radii(); ++i) {
            double rms = 0.0;
            for (double v : m.values.row(i)) rms += v * v;
            rms = std::sqrt(rms / 64.0);
            for (int k = -32; k < 32; ++k) {
                const auto before = dft_bin(m.values.row(i), k);
                const auto after = dft_bin(f.values.row(i), k);
                if (k == 1 || k == -1) {
                    CHECK(std::abs(after) <= 1e-10 * rms * 64.0);
                } else {
                    CHECK(std::abs(after - before) <= 1e-10 * std::max(std::abs(before), rms));
                }
            }
        }
    }
}

TEST_CASE("azimuthal filter removes a cosine bias and keeps masked pixels masked") {
    PolarMap m;
    m.radii = {1.0, 1.5};
    m.values = Grid2D<double>(2, 32);
    m.valid = Grid2D<std::uint8_t>(2, 32, 1);
    for (std::size_t j = 0; j < 32; ++j) {
        const double th = two_pi * static_cast<double>(j) / 32.0;
        m.values(0, j) = 5.0 + 2.0 * std::cos(th - 0.7) + std::cos(3.0 * th);
        m.values(1, j) = -1.0;
    }
    m.valid(1, 4) = 0;
    const auto f = azimuthal_filter(m);
    for (std::size_t j = 0; j < 32; ++j) {
        const double th = two_pi * static_cast<double>(j) / 32.0;
        CHECK(f.values(0, j) == doctest::Approx(5.0 + std::cos(3.0 * th)));
    }
    CHECK(f.valid(1, 4) == 0);
}

TEST_CASE("superpixels partition valid pixels and match a brute-force assignment") {
    Rng rng(6);
    const AnnulusSpec annulus;
    for (double beta : {0.0, 0.35}) {
        TrajectoryModel traj{beta == 0.0 ? TrajectoryKind::radial : TrajectoryKind::arcuate, beta};
        auto m = random_map(rng, 141, 256, 0.65, 2.45);
        m = apply_annulus(m, annulus);
        for (std::size_t k = 0; k < 500; ++k) m.valid(rng.below(141), rng.below(256)) = 0;
        const auto g = to_superpixels(m, traj, 32, 32, annulus);

        Grid2D<double> sum(32, 32, 0.0);
        Grid2D<std::uint32_t> cnt(32, 32, 0);
        for (std::size_t i = 0; i < m.n_radii(); ++i) {
            for (std::size_t j = 0; j < m.n_angles(); ++j) {
                if (!m.valid(i, j)) continue;
                const double t = (m.radii[i] - 1.05) / 1.05;
                const double th = two_pi * static_cast<double>(j) / 256.0;
                double seed = th - beta * (th < std::numbers::pi ? 1.0 : -1.0) * t;
                seed = std::fmod(seed + 2.0 * two_pi, two_pi);
                // Radial case in exact integer arithmetic; otherwise edges
                // within 1e-9 of a boundary belong to the upper cell.
                const auto track = beta == 0.0
                                       ? j * 32 / 256
                                       : static_cast<std::size_t>(std::floor(seed / two_pi * 32.0 + 1e-9)) % 32;
                const auto seg = std::min<std::size_t>(static_cast<std::size_t>(std::floor(t * 32.0 + 1e-9)), 31);
                sum(seg, track) += m.values(i, j);
                cnt(seg, track) += 1;
            }
        }
        CHECK(g.counts == cnt);
        CHECK(g.total_count() == m.valid_count());
        for (std::size_t c = 0; c < 32 * 32; ++c) {
            if (cnt.data()[c] == 0) {
                CHECK(std::isnan(g.values.data()[c]));
            } else {
                CHECK(g.values.data()[c] == doctest::Approx(sum.data()[c] / cnt.data()[c]).epsilon(1e-13));
            }
        }
        CHECK(std::abs(grid_average(g) - m.masked_mean()) <= 1e-12);
    }
}

TEST_CASE("radial superpixels reproduce a sector-constant map") {
    PolarMap m;
    m.radii = linspace(1.05, 2.1, 40);
    m.values = Grid2D<double>(40, 256);
    m.valid = Grid2D<std::uint8_t>(40, 256, 1);
    for (std::size_t i = 0; i < 40; ++i) {
        for (std::size_t j = 0; j < 256; ++j) m.values(i, j) = static_cast<double>(j / 8);
    }
    const auto g = to_superpixels(m, {TrajectoryKind::radial, 0.35}, 32, 32, {});
    for (std::size_t s = 0; s < 32; ++s) {
        for (std::size_t k = 0; k < 32; ++k) {
            if (!g.empty_cell(s, k)) CHECK(g.values(s, k) == static_cast<double>(k));
        }
    }
    CHECK_THROWS_AS(to_superpixels(m, {}, 0, 32, {}), Error);
}

TEST_CASE("normative fit and focal loss volume") {
    Rng rng(8);
    std::vector<SuperpixelGrid> normals;
    for (int n = 0; n < 41; ++n) {
        SuperpixelGrid g;
        g.values = Grid2D<double>(2, 3);
        g.counts = Grid2D<std::uint32_t>(2, 3, 5);
        for (auto& v : g.values.data()) v = rng.normal(100.0, 10.0);
        g.counts(1, 2) = 0;
        normals.push_back(g);
    }
    const auto norm = fit_normative(normals);
    std::vector<double> cell;
    for (const auto& g : normals) cell.push_back(g.values(0, 1));
    std::sort(cell.begin(), cell.end());
    // Type-7 quantile at p = 0.05 over 41 values lands exactly on index 2.
    CHECK(norm.cutoff(0, 1) == cell[2]);
    CHECK(std::isnan(norm.mean(1, 2)));

    SuperpixelGrid at_mean;
    at_mean.values = norm.mean;
    at_mean.counts = Grid2D<std::uint32_t>(2, 3, 1);
    CHECK(focal_loss_volume(at_mean, norm, FlvKind::thickness) == 0.0);
    CHECK(focal_loss_volume(at_mean, norm, FlvKind::reflectance_db) == 0.0);

    auto low = at_mean;
    low.values(0, 0) = norm.cutoff(0, 0) - 1.0;
    const double expect_t = 100.0 * (norm.mean(0, 0) - low.values(0, 0)) / norm.mean(0, 0) / 5.0;
    CHECK(focal_loss_volume(low, norm, FlvKind::thickness) == doctest::Approx(expect_t));
    CHECK(focal_loss_volume(low, norm, FlvKind::reflectance_db) ==
          doctest::Approx((low.values(0, 0) - norm.mean(0, 0)) / 5.0));
}

TEST_CASE("process_scan keeps the pipeline order contract") {
    MapGeometry geo;
    const auto rings = geo.ring_diameters();
    RingProfileSet p;
    p.ring_diameters = rings;
    p.nfl_band_sum = Grid2D<double>(rings.size(), geo.n_angles);
    p.ppec_band_mean = Grid2D<double>(rings.size(), geo.n_angles, 50.0);
    p.nfl_thickness = Grid2D<double>(rings.size(), geo.n_angles, 90.0);
    for (std::size_t k = 0; k < rings.size(); ++k) {
        for (std::size_t j = 0; j < geo.n_angles; ++j) {
            const double th = two_pi * static_cast<double>(j) / static_cast<double>(geo.n_angles);
            // -8 dB plus a 2 dB incident-angle term.
            p.nfl_band_sum(k, j) = 50.0 * std::pow(10.0, (-8.0 + 2.0 * std::cos(th - 1.0)) / 10.0);
        }
    }
    VesselMask none{Grid2D<std::uint8_t>(geo.n_radii, geo.n_angles, 0)};
    const auto out = process_scan(p, none, {0.0, 0.0}, geo);
    CHECK(out.thickness.n_segments() == 32);
    CHECK(out.thickness.n_tracks() == 32);
    CHECK(grid_average(out.thickness) == doctest::Approx(90.0));
    for (std::size_t c = 0; c < out.reflectance.values.size(); ++c) {
        if (out.reflectance.counts.data()[c]) CHECK(out.reflectance.values.data()[c] == doctest::Approx(-8.0));
    }
}
