// Acceptance run: prints one PASS/FAIL line per criterion and exits
// nonzero if any fails. Criteria 5, 6 and 8 run the full default pipeline
// (twice for 8), so expect roughly a quarter of an hour on one core.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <complex>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <numbers>
#include <sstream>
#include <string>
#include <vector>

#include "nflr/bundle.hpp"
#include "nflr/commands.hpp"
#include "nflr/hybrid.hpp"
#include "nflr/polar_map.hpp"
#include "nflr/rng.hpp"
#include "nflr/roc.hpp"

using namespace nflr;
namespace fs = std::filesystem;

namespace {

constexpr double two_pi = 2.0 * std::numbers::pi;

struct Outcome {
    bool pass = false;
    std::string detail;
    double seconds = 0.0;
};

double since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

PolarMap random_map(Rng& rng, std::size_t nr, std::size_t na, double r0, double r1) {
    PolarMap m;
    m.radii = linspace(r0, r1, nr);
    m.values = Grid2D<double>(nr, na);
    m.valid = Grid2D<std::uint8_t>(nr, na, 1);
    for (auto& v : m.values.data()) v = rng.normal(rng.uniform(-10.0, 10.0), rng.uniform(0.5, 5.0));
    return m;
}

// Unnormalized DFT bin k of a row of length n, from a table of the n roots.
std::complex<double> dft_bin(std::span<const double> row, int k, const std::vector<std::complex<double>>& roots) {
    const auto n = static_cast<long>(row.size());
    std::complex<double> acc = 0.0;
    for (long j = 0; j < n; ++j) acc += row[static_cast<std::size_t>(j)] * roots[static_cast<std::size_t>(((k * j) % n + n) % n)];
    return acc;
}

Outcome criterion_filter() {
    Rng rng(101);
    std::vector<std::complex<double>> roots(256);
    for (std::size_t j = 0; j < 256; ++j) roots[j] = std::polar(1.0, -two_pi * static_cast<double>(j) / 256.0);
    double worst_removed = 0.0, worst_kept = 0.0;
    for (int t = 0; t < 100; ++t) {
        const auto m = random_map(rng, 8, 256, 1.0, 2.5);
        const auto f = azimuthal_filter(m);
        for (std::size_t i = 0; i < m.n_radii(); ++i) {
            const auto row = m.values.row(i);
            double rms = 0.0;
            for (double v : row) rms += v * v;
            rms = std::sqrt(rms / static_cast<double>(row.size()));
            for (int k = -128; k < 128; ++k) {
                const auto before = dft_bin(row, k, roots);
                const auto after = dft_bin(f.values.row(i), k, roots);
                // Unnormalized DFT: divide by n to compare against the row RMS.
                if (k == 1 || k == -1) {
                    worst_removed = std::max(worst_removed, std::abs(after) / 256.0 / rms);
                } else {
                    const double scale = std::max(std::abs(before), 1e-300);
                    worst_kept = std::max(worst_kept, std::abs(after - before) / scale);
                }
            }
        }
    }
    Outcome o;
    o.pass = worst_removed <= 1e-10 && worst_kept <= 1e-10;
    o.detail = "max |k=±1|/rms " + fmt("%.2e", worst_removed) + ", max rel change elsewhere " + fmt("%.2e", worst_kept);
    return o;
}

Outcome criterion_gradient() {
    const ModelConfig cfg;
    double worst = 0.0;
    std::string where;
    for (std::uint64_t seed : {1u, 2u, 3u}) {
        const auto model = HybridModel::initialized(cfg, seed);
        Rng rng(seed + 1000);
        Example ex;
        ex.maps.resize(cfg.cnn_channels_in * cfg.grid_height * cfg.grid_width);
        ex.scalars.resize(cfg.fcn_inputs);
        for (auto& v : ex.maps) v = rng.normal(50.0, 20.0);
        for (auto& v : ex.scalars) v = rng.normal(0.0, 3.0);
        ex.label = static_cast<int>(seed % 2);
        const auto r = gradient_check(model, ex);
        if (r.max_relative_error >= worst) {
            worst = r.max_relative_error;
            where = r.worst_block;
        }
    }
    Outcome o;
    o.pass = worst < 1e-5;
    o.detail = std::to_string(parameter_count(cfg)) + " params x 3 seeds, max rel error " + fmt("%.2e", worst) +
               " (" + where + ")";
    return o;
}

double pair_count_auc(const std::vector<double>& s, const std::vector<int>& y) {
    double wins = 0.0, pairs = 0.0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (!y[i]) continue;
        for (std::size_t j = 0; j < s.size(); ++j) {
            if (y[j]) continue;
            pairs += 1.0;
            wins += s[i] > s[j] ? 1.0 : (s[i] == s[j] ? 0.5 : 0.0);
        }
    }
    return wins / pairs;
}

Outcome criterion_auc() {
    Rng rng(303);
    std::size_t exact = 0;
    double worst_area = 0.0;
    for (int t = 0; t < 200; ++t) {
        const auto n = 2 + rng.below(49);
        const auto levels = 2 + rng.below(10);
        std::vector<double> s;
        std::vector<int> y;
        for (std::uint64_t i = 0; i < n; ++i) {
            y.push_back(i == 0 ? 0 : i == 1 ? 1 : static_cast<int>(rng.below(2)));
            s.push_back(static_cast<double>(rng.below(levels)) + (y.back() ? 0.5 * rng.uniform() : 0.0));
        }
        const double a = auc(s, y);
        exact += a == pair_count_auc(s, y);
        const auto r = roc_curve(s, y);
        double area = 0.0;
        for (std::size_t i = 1; i < r.fpr.size(); ++i) area += (r.fpr[i] - r.fpr[i - 1]) * (r.tpr[i] + r.tpr[i - 1]) / 2.0;
        worst_area = std::max(worst_area, std::abs(area - a));
    }
    Outcome o;
    o.pass = exact == 200 && worst_area <= 1e-12;
    o.detail = std::to_string(exact) + "/200 exact, max |trapezoid - auc| " + fmt("%.1e", worst_area);
    return o;
}

struct Paired {
    std::vector<double> a, b;
    std::vector<int> y;
};

// 50 positives and 50 negatives; the two scores share part of their noise.
Paired correlated_case(Rng& rng, double shift_a, double shift_b, double rho) {
    Paired p;
    for (int i = 0; i < 100; ++i) {
        const int y = i < 50 ? 1 : 0;
        const double e1 = rng.normal(), e2 = rng.normal();
        p.y.push_back(y);
        p.a.push_back(shift_a * y + e1);
        p.b.push_back(shift_b * y + rho * e1 + std::sqrt(1.0 - rho * rho) * e2);
    }
    return p;
}

// Stratified paired bootstrap of the AUC difference, normal approximation.
double bootstrap_p(const Paired& p, std::size_t reps, Rng& rng) {
    std::vector<std::size_t> pos, neg;
    for (std::size_t i = 0; i < p.y.size(); ++i) (p.y[i] ? pos : neg).push_back(i);
    const double observed = auc(p.a, p.y) - auc(p.b, p.y);
    std::vector<double> diffs;
    diffs.reserve(reps);
    std::vector<double> a, b;
    std::vector<int> y;
    for (std::size_t r = 0; r < reps; ++r) {
        a.clear();
        b.clear();
        y.clear();
        for (const auto* group : {&pos, &neg}) {
            for (std::size_t k = 0; k < group->size(); ++k) {
                const auto i = (*group)[rng.below(group->size())];
                a.push_back(p.a[i]);
                b.push_back(p.b[i]);
                y.push_back(p.y[i]);
            }
        }
        diffs.push_back(auc(a, y) - auc(b, y));
    }
    double mean = 0.0;
    for (double d : diffs) mean += d / static_cast<double>(reps);
    double var = 0.0;
    for (double d : diffs) var += (d - mean) * (d - mean) / static_cast<double>(reps - 1);
    return normal_two_sided_p(observed / std::sqrt(var));
}

double binomial_cdf(std::size_t k, std::size_t n, double p) {
    double total = 0.0;
    for (std::size_t i = 0; i <= k; ++i) {
        total += std::exp(std::lgamma(n + 1.0) - std::lgamma(i + 1.0) - std::lgamma(n - i + 1.0) +
                          static_cast<double>(i) * std::log(p) + static_cast<double>(n - i) * std::log1p(-p));
    }
    return total;
}

Outcome criterion_delong() {
    Rng rng(404);
    const auto p = correlated_case(rng, 1.2, 0.7, 0.6);
    const double p_delong = delong_test(p.a, p.b, p.y).p_value;
    const double p_boot = bootstrap_p(p, 10000, rng);

    std::size_t rejections = 0;
    for (int s = 0; s < 1000; ++s) {
        const auto null = correlated_case(rng, 0.8, 0.8, 0.5);
        rejections += delong_test(null.a, null.b, null.y).p_value < 0.05;
    }
    std::size_t lo = 0, hi = 1000;
    while (binomial_cdf(lo, 1000, 0.05) < 0.005) ++lo;
    while (hi > 0 && binomial_cdf(hi - 1, 1000, 0.05) >= 0.995) --hi;

    Outcome o;
    o.pass = std::abs(p_delong - p_boot) <= 0.02 && rejections >= lo && rejections <= hi;
    o.detail = "p delong " + fmt("%.4f", p_delong) + " vs bootstrap " + fmt("%.4f", p_boot) + "; null rejections " +
               std::to_string(rejections) + "/1000, band [" + std::to_string(lo) + ", " + std::to_string(hi) + "]";
    return o;
}

Outcome criterion_conservation() {
    Rng rng(707);
    const AnnulusSpec annulus;
    double worst_mean = 0.0;
    std::size_t count_ok = 0;
    for (int t = 0; t < 100; ++t) {
        auto m = apply_annulus(random_map(rng, 141, 256, 0.65, 2.45), annulus);
        const auto holes = rng.below(2000);
        for (std::uint64_t k = 0; k < holes; ++k) m.valid(rng.below(141), rng.below(256)) = 0;
        const TrajectoryModel traj{t % 2 ? TrajectoryKind::arcuate : TrajectoryKind::radial, 0.35};
        const auto g = to_superpixels(m, traj, 32, 32, annulus);
        worst_mean = std::max(worst_mean, std::abs(grid_average(g) - m.masked_mean()));
        count_ok += g.total_count() == m.valid_count();
    }
    Outcome o;
    o.pass = worst_mean <= 1e-12 && count_ok == 100;
    o.detail = "max |grid mean - map mean| " + fmt("%.1e", worst_mean) + ", counts match " +
               std::to_string(count_ok) + "/100";
    return o;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

std::map<std::string, double> aucs_from_metrics(const fs::path& path) {
    std::map<std::string, double> out;
    std::istringstream in(slurp(path));
    std::string line;
    std::getline(in, line);
    std::vector<std::string> header;
    {
        std::istringstream h(line);
        std::string cell;
        while (std::getline(h, cell, ',')) header.push_back(cell);
    }
    const auto col = static_cast<std::size_t>(std::find(header.begin(), header.end(), "auc") - header.begin());
    while (std::getline(in, line)) {
        std::istringstream r(line);
        std::vector<std::string> cells;
        std::string cell;
        while (std::getline(r, cell, ',')) cells.push_back(cell);
        if (cells.size() > col) out[cells[0]] = std::stod(cells[col]);
    }
    return out;
}

GlobalOptions single_threaded(const fs::path& out) {
    GlobalOptions o;
    o.out = out;
    o.threads = 1;
    return o;
}

double run_gen_maps(const fs::path& root) {
    const auto t0 = std::chrono::steady_clock::now();
    cmd_gen(single_threaded(root / "bundle"));
    cmd_maps(single_threaded(root / "bundle"), root / "bundle");
    return since(t0);
}

double run_train_eval(const fs::path& root) {
    const auto t0 = std::chrono::steady_clock::now();
    for (const auto& v : model_variants) cmd_train(single_threaded(root / "run"), root / "bundle", {v, nullptr});
    cmd_eval(single_threaded(root / "run"), root / "bundle", {});
    return since(t0);
}

Outcome criterion_ordering(const fs::path& root, double seconds) {
    auto a = aucs_from_metrics(root / "run" / "metrics.csv");
    const double h2 = a["hybrid-2ch"], h1 = a["hybrid-1ch"], la = a["logit-a"], lb = a["logit-b"];
    Outcome o;
    o.seconds = seconds;
    const bool order = h2 >= h1 && h1 >= std::max(la, lb);
    o.pass = order && h2 >= 0.95 && h2 - la >= 0.02 && seconds <= 600.0;
    o.detail = "AROC hybrid-2ch " + fmt("%.4f", h2) + ", hybrid-1ch " + fmt("%.4f", h1) + ", logit-a " +
               fmt("%.4f", la) + ", logit-b " + fmt("%.4f", lb) + "; margin vs logit-a " + fmt("%+.4f", h2 - la) +
               (order ? "" : "; ordering violated");
    return o;
}

struct EyeMeans {
    double rnfl = 0, nflr = 0, gcc_sup = 0, gcc_inf = 0, rim = 0, vcdr = 0, cdr = 0, rnfl_flv = 0, gcc_flv = 0,
           nflr_flv = 0;
};

Outcome criterion_calibration(const fs::path& bundle_dir, double seconds) {
    const auto b = open_bundle(bundle_dir);
    const auto& scans = b.manifest.at("processed").at("scans");
    // Eye-level means over repeat scans, keyed by subject and eye.
    std::map<std::string, std::pair<EyeMeans, int>> eyes;
    std::map<std::string, Group> group_of;
    for (std::size_t i = 0; i < b.scans.size(); ++i) {
        const auto& s = b.scans[i];
        const auto& r = b.records[i];
        SuperpixelGrid g;
        g.values = Grid2D<double>(32, 32);
        g.counts = Grid2D<std::uint32_t>(32, 32);
        const auto& entry = scans.at(s.scan_id);
        const auto values = read_array(bundle_dir, array_ref_from_json(entry.at("thickness")));
        const auto counts = read_array(bundle_dir, array_ref_from_json(entry.at("thickness_counts")));
        for (std::size_t c = 0; c < values.size(); ++c) {
            g.values.data()[c] = values[c];
            g.counts.data()[c] = static_cast<std::uint32_t>(counts[c]);
        }
        const auto key = s.subject_id + "/" + to_string(s.eye);
        group_of[key] = s.group;
        auto& [m, n] = eyes[key];
        m.rnfl += grid_average(g);
        m.nflr += *r.nflr_avg;
        m.gcc_sup += r.record.gcc_sup;
        m.gcc_inf += r.record.gcc_inf;
        m.rim += r.record.rim_area;
        m.vcdr += r.record.vcdr;
        m.cdr += r.record.cd_area_ratio;
        m.rnfl_flv += r.record.rnfl_flv;
        m.gcc_flv += r.record.gcc_flv;
        m.nflr_flv += *r.nflr_flv;
        ++n;
    }
    std::map<Group, std::vector<EyeMeans>> by_group;
    for (auto& [key, v] : eyes) {
        auto [m, n] = v;
        for (double* f : {&m.rnfl, &m.nflr, &m.gcc_sup, &m.gcc_inf, &m.rim, &m.vcdr, &m.cdr, &m.rnfl_flv, &m.gcc_flv,
                          &m.nflr_flv}) {
            *f /= n;
        }
        by_group[group_of[key]].push_back(m);
    }
    const auto stats = [](const std::vector<EyeMeans>& v, double EyeMeans::*f) {
        double mean = 0.0;
        for (const auto& e : v) mean += e.*f / static_cast<double>(v.size());
        double var = 0.0;
        for (const auto& e : v) var += (e.*f - mean) * (e.*f - mean) / static_cast<double>(v.size() - 1);
        return std::pair{mean, std::sqrt(var / static_cast<double>(v.size()))};
    };
    const auto& normal = by_group[Group::normal];
    const auto& pg = by_group[Group::pg];
    const auto [rnfl_mean, rnfl_se] = stats(normal, &EyeMeans::rnfl);
    const auto [nflr_mean, nflr_se] = stats(normal, &EyeMeans::nflr);
    const bool rnfl_ok = std::abs(rnfl_mean - 99.2) <= rnfl_se;
    const bool nflr_ok = std::abs(nflr_mean - -8.11) <= nflr_se;

    struct Dir {
        const char* name;
        double EyeMeans::*field;
        int sign;  // +1: PG higher, -1: PG lower
    };
    const Dir dirs[] = {{"rnfl_avg", &EyeMeans::rnfl, -1},      {"gcc_sup", &EyeMeans::gcc_sup, -1},
                        {"gcc_inf", &EyeMeans::gcc_inf, -1},    {"rim_area", &EyeMeans::rim, -1},
                        {"nflr_avg", &EyeMeans::nflr, -1},      {"vcdr", &EyeMeans::vcdr, 1},
                        {"cd_area_ratio", &EyeMeans::cdr, 1},   {"rnfl_flv", &EyeMeans::rnfl_flv, 1},
                        {"gcc_flv", &EyeMeans::gcc_flv, 1},     {"nflr_flv", &EyeMeans::nflr_flv, -1}};
    std::string violated;
    for (const auto& d : dirs) {
        const double diff = stats(pg, d.field).first - stats(normal, d.field).first;
        if (!(diff * d.sign > 0.0)) violated += std::string(" ") + d.name;
    }
    Outcome o;
    o.seconds = seconds;
    o.pass = rnfl_ok && nflr_ok && violated.empty() && seconds < 120.0;
    o.detail = "normal rnfl " + fmt("%.2f", rnfl_mean) + " (SE " + fmt("%.2f", rnfl_se) + ", target 99.2), nflr " +
               fmt("%.3f", nflr_mean) + " (SE " + fmt("%.3f", nflr_se) + ", target -8.11); " +
               std::to_string(normal.size()) + " normal / " + std::to_string(pg.size()) + " PG eyes; " +
               (violated.empty() ? std::string("all PG orderings hold") : "orderings violated:" + violated);
    return o;
}

Outcome criterion_determinism(const fs::path& first, const fs::path& second, double first_seconds,
                              double second_seconds) {
    std::vector<fs::path> files{"metrics.csv"};
    for (const auto& v : {"hybrid-2ch", "hybrid-1ch"}) {
        files.push_back(fs::path(v) / "checkpoint.json");
        files.push_back(fs::path(v) / "params.bin");
    }
    for (const auto& v : {"logit-a", "logit-b"}) files.push_back(fs::path(v) / "model.json");
    std::string differing;
    for (const auto& f : files) {
        const auto a = first / "run" / f;
        const auto b = second / "run" / f;
        if (!fs::exists(a) || slurp(a) != slurp(b)) differing += " " + f.string();
    }
    const bool bundle_same = slurp(first / "bundle" / "manifest.json") == slurp(second / "bundle" / "manifest.json");
    Outcome o;
    o.seconds = first_seconds + second_seconds;
    o.pass = differing.empty() && bundle_same && o.seconds <= 2.0 * 600.0;
    o.detail = std::to_string(files.size()) + " artifacts compared, " +
               (differing.empty() ? std::string("all byte-identical") : "differ:" + differing) +
               (bundle_same ? "" : "; bundle manifests differ");
    return o;
}

template <class F>
Outcome timed(F&& f, double limit_seconds) {
    const auto t0 = std::chrono::steady_clock::now();
    Outcome o;
    try {
        o = f();
    } catch (const std::exception& e) {
        o.pass = false;
        o.detail = std::string("error: ") + e.what();
    }
    if (o.seconds == 0.0) o.seconds = since(t0);
    if (o.seconds > limit_seconds) {
        o.pass = false;
        o.detail += "; over time limit";
    }
    return o;
}

}  // namespace

int main(int argc, char** argv) {
    // --fast skips the pipeline criteria (5, 6, 8).
    bool fast = false;
    fs::path work = fs::temp_directory_path() / "nflr_acceptance";
    for (int i = 1; i < argc; ++i) {
        if (std::string(argv[i]) == "--fast") fast = true;
        else work = argv[i];
    }
    fs::remove_all(work);
    fs::create_directories(work);

    std::map<int, Outcome> results;
    const auto note = [](int k) { std::cerr << "running criterion " << k << "...\n"; };

    note(1);
    results[1] = timed(criterion_filter, 5.0);
    note(2);
    results[2] = timed(criterion_gradient, 60.0);
    note(3);
    results[3] = timed(criterion_auc, 5.0);
    note(4);
    results[4] = timed(criterion_delong, 120.0);
    note(7);
    results[7] = timed(criterion_conservation, 5.0);

    if (fast) {
        for (const auto& [k, o] : results) std::printf("criterion %d: %s (%.1f s) %s\n", k, o.pass ? "PASS" : "FAIL", o.seconds, o.detail.c_str());
        return 0;
    }

    note(6);
    double gen_maps_a = 0.0;
    results[6] = timed(
        [&] {
            gen_maps_a = run_gen_maps(work / "a");
            return criterion_calibration(work / "a" / "bundle", gen_maps_a);
        },
        120.0);
    note(5);
    double first_total = 0.0;
    results[5] = timed(
        [&] {
            first_total = gen_maps_a + run_train_eval(work / "a");
            return criterion_ordering(work / "a", first_total);
        },
        600.0);
    note(8);
    results[8] = timed(
        [&] {
            const double second = run_gen_maps(work / "b") + run_train_eval(work / "b");
            return criterion_determinism(work / "a", work / "b", first_total, second);
        },
        1200.0);

    const char* names[] = {"",
                           "azimuthal filter spectral contract",
                           "gradient correctness",
                           "AUC oracle equivalence",
                           "DeLong validity",
                           "model ordering on phantom",
                           "cohort calibration",
                           "superpixel conservation and partition",
                           "end-to-end determinism"};
    int failed = 0;
    for (const auto& [k, o] : results) {
        std::printf("criterion %d %s: %s (%.1f s) %s\n", k, names[k], o.pass ? "PASS" : "FAIL", o.seconds,
                    o.detail.c_str());
        failed += !o.pass;
    }
    return failed == 0 ? 0 : 1;
}
