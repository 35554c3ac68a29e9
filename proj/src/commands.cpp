#include "nflr/commands.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "json.hpp"
#include "nflr/binary_io.hpp"
#include "nflr/bundle.hpp"
#include "nflr/error.hpp"
#include "nflr/hybrid.hpp"
#include "nflr/logistic.hpp"
#include "nflr/roc.hpp"
#include "nflr/train.hpp"

namespace nflr {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

// Runs fn(i) for i in [0, n) on up to `threads` workers. fn writes only to
// its own slot, so results do not depend on scheduling. The first exception
// is rethrown after all workers stop.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t threads, Fn&& fn) {
    threads = std::max<std::size_t>(1, std::min(threads, n));
    if (threads == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr failure;
    std::mutex failure_mutex;
    {
        std::vector<std::jthread> pool;
        for (std::size_t t = 0; t < threads; ++t) {
            pool.emplace_back([&] {
                for (;;) {
                    const std::size_t i = next.fetch_add(1);
                    if (i >= n) return;
                    try {
                        fn(i);
                    } catch (...) {
                        std::lock_guard lock(failure_mutex);
                        if (!failure) failure = std::current_exception();
                        next = n;
                    }
                }
            });
        }
    }
    if (failure) std::rethrow_exception(failure);
}

std::vector<double> to_doubles(const Grid2D<std::uint8_t>& g) {
    return {g.data().begin(), g.data().end()};
}

std::vector<double> to_doubles(const Grid2D<std::uint32_t>& g) {
    return {g.data().begin(), g.data().end()};
}

template <typename T>
Grid2D<T> grid_from(const std::vector<double>& v, const ArrayRef& ref) {
    if (ref.dims.size() != 2) throw Error(ErrorKind::integrity, "array " + ref.path + " is not two-dimensional");
    Grid2D<T> g(ref.dims[0], ref.dims[1]);
    for (std::size_t i = 0; i < v.size(); ++i) g.data()[i] = static_cast<T>(v[i]);
    return g;
}

const ArrayRef& array_of(const ScanEntry& s, const std::string& name) {
    auto it = s.arrays.find(name);
    if (it == s.arrays.end()) throw Error(ErrorKind::integrity, "scan " + s.scan_id + " lacks array " + name);
    return it->second;
}

ordered_json defect_json(const DefectSpec& d) {
    return {{"center_track", d.center_track},       {"width_tracks", d.width_tracks},
            {"depth_thickness", d.depth_thickness}, {"depth_reflectance_db", d.depth_reflectance},
            {"segment_begin", d.segment_begin},     {"segment_end", d.segment_end}};
}

bool dir_nonempty(const fs::path& dir) {
    return fs::exists(dir) && (!fs::is_directory(dir) || !fs::is_empty(dir));
}

// Removes only entries this tool writes, so a mistyped --out with --force
// cannot wipe unrelated files.
void clear_entries(const fs::path& dir, std::initializer_list<const char*> names) {
    for (const char* name : names) fs::remove_all(dir / name);
}

void ensure_ring_geometry_matches(const MapGeometry& cfg, const json& bundle_maps) {
    const auto check = [&](const char* key, double want) {
        const double have = bundle_maps.at(key).get<double>();
        if (have != want) {
            throw Error(ErrorKind::precondition, std::string("maps.") + key + " differs from the bundle (" +
                                                     format_double(have) + " vs " + format_double(want) + ")");
        }
    };
    check("n_rings", static_cast<double>(cfg.n_rings));
    check("ring_min_diameter", cfg.ring_min_diameter);
    check("ring_max_diameter", cfg.ring_max_diameter);
    check("n_angles", static_cast<double>(cfg.n_angles));
}

const ordered_json& processed_of(const Bundle& b) {
    if (!b.processed()) {
        throw Error(ErrorKind::precondition,
                    "bundle " + b.dir.string() + " has no processed grids; run `nflr maps " + b.dir.string() + "` first");
    }
    return b.manifest.at("processed");
}

std::uint64_t bundle_split_seed(const Bundle& b) { return processed_of(b).at("split_seed").get<std::uint64_t>(); }

void ensure_split_matches(const Bundle& b, const RunConfig& cfg) {
    const auto& p = processed_of(b);
    const auto have = p.at("split_seed").get<std::uint64_t>();
    if (have != cfg.split_seed()) {
        throw Error(ErrorKind::precondition, "split seed " + std::to_string(cfg.split_seed()) +
                                                 " differs from the seed the bundle was processed with (" +
                                                 std::to_string(have) + "); rerun `nflr maps` or set evaluation.split_seed");
    }
    if (p.at("train_fraction").get<double>() != cfg.evaluation.train_fraction) {
        throw Error(ErrorKind::precondition, "evaluation.train_fraction differs from the processed bundle");
    }
}

std::set<std::string> fold_subjects(const Bundle& b, const char* key) {
    const auto list = processed_of(b).at(key).get<std::vector<std::string>>();
    return {list.begin(), list.end()};
}

std::vector<std::size_t> fold_scans(const Bundle& b, const char* key) {
    const auto subjects = fold_subjects(b, key);
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < b.scans.size(); ++i) {
        if (subjects.count(b.scans[i].subject_id)) idx.push_back(i);
    }
    return idx;
}

struct ScanGrids {
    std::vector<double> thickness, reflectance;
    std::vector<std::uint8_t> thickness_empty, reflectance_empty;
};

ScanGrids read_grids(const Bundle& b, std::size_t scan, bool with_reflectance) {
    const auto& id = b.scans[scan].scan_id;
    const auto& entry = processed_of(b).at("scans");
    if (!entry.contains(id)) throw Error(ErrorKind::integrity, "no processed grids for scan " + id);
    const auto& e = entry.at(id);
    ScanGrids g;
    const auto load = [&](const char* values_key, const char* counts_key, std::vector<double>& values,
                          std::vector<std::uint8_t>& empty) {
        values = read_array(b.dir, array_ref_from_json(e.at(values_key)));
        const auto counts = read_array(b.dir, array_ref_from_json(e.at(counts_key)));
        empty.resize(counts.size());
        for (std::size_t i = 0; i < counts.size(); ++i) empty[i] = counts[i] == 0.0;
    };
    load("thickness", "thickness_counts", g.thickness, g.thickness_empty);
    if (with_reflectance) load("reflectance", "reflectance_counts", g.reflectance, g.reflectance_empty);
    return g;
}

std::vector<double> fcn_scalars(const EyeRecord& r) {
    return {r.age,      static_cast<double>(r.gender), r.axial_length,  r.gcc_sup, r.gcc_inf,
            r.gcc_flv,  r.disc_area,                   r.rim_area,      r.cd_area_ratio, r.vcdr};
}

Example hybrid_example(const Bundle& b, std::size_t scan, std::size_t channels) {
    auto g = read_grids(b, scan, channels == 2);
    Example ex;
    ex.maps = std::move(g.thickness);
    ex.empty = std::move(g.thickness_empty);
    if (channels == 2) {
        ex.maps.insert(ex.maps.end(), g.reflectance.begin(), g.reflectance.end());
        ex.empty.insert(ex.empty.end(), g.reflectance_empty.begin(), g.reflectance_empty.end());
    }
    const auto& rec = b.records[scan].record;
    ex.scalars = fcn_scalars(rec);
    ex.label = rec.group == Group::pg ? 1 : 0;
    return ex;
}

std::vector<double> logistic_features(const RecordRow& row, FeatureVariant variant) {
    return build_features(row.record, {row.nflr_avg, row.nflr_flv}, variant);
}

bool is_hybrid(const std::string& variant) { return variant.rfind("hybrid", 0) == 0; }

FeatureVariant logit_variant(const std::string& variant) {
    return variant == "logit-b" ? FeatureVariant::with_reflectance : FeatureVariant::without_reflectance;
}

std::string read_run_variant(const fs::path& dir, std::uint64_t* split_seed) {
    const auto path = dir / "run.json";
    if (!fs::exists(path)) {
        throw Error(ErrorKind::precondition, dir.string() + " is not a trained model directory (missing run.json)");
    }
    const auto j = json::parse(read_text(path));
    if (split_seed) *split_seed = j.at("split_seed").get<std::uint64_t>();
    return j.at("variant").get<std::string>();
}

// --------------------------------------------------------------------------
// ROC overlay

std::string roc_svg(const std::vector<std::string>& names, const std::vector<RocResult>& rocs, std::uint64_t split_seed,
                    const std::string& unit) {
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf"};
    const double x0 = 60, y0 = 20, side = 400;
    std::ostringstream os;
    char buf[64];
    const auto px = [&](double fpr) {
        std::snprintf(buf, sizeof buf, "%.3f", x0 + fpr * side);
        return std::string(buf);
    };
    const auto py = [&](double tpr) {
        std::snprintf(buf, sizeof buf, "%.3f", y0 + (1.0 - tpr) * side);
        return std::string(buf);
    };
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"640\" height=\"480\" font-family=\"sans-serif\" "
          "font-size=\"12\">\n";
    os << "<title>ROC curves, split seed " << split_seed << ", unit " << unit << "</title>\n";
    os << "<rect x=\"" << x0 << "\" y=\"" << y0 << "\" width=\"" << side << "\" height=\"" << side
       << "\" fill=\"none\" stroke=\"#000\"/>\n";
    os << "<line x1=\"" << px(0) << "\" y1=\"" << py(0) << "\" x2=\"" << px(1) << "\" y2=\"" << py(1)
       << "\" stroke=\"#aaa\" stroke-dasharray=\"4 4\"/>\n";
    for (int t = 0; t <= 10; t += 2) {
        const double v = t / 10.0;
        std::snprintf(buf, sizeof buf, "%.1f", v);
        const std::string label = buf;
        os << "<text x=\"" << px(v) << "\" y=\"" << y0 + side + 16 << "\" text-anchor=\"middle\">" << label
           << "</text>\n";
        os << "<text x=\"" << x0 - 6 << "\" y=\"" << py(v) << "\" text-anchor=\"end\" dy=\"4\">" << label
           << "</text>\n";
    }
    os << "<text x=\"" << x0 + side / 2 << "\" y=\"" << y0 + side + 36
       << "\" text-anchor=\"middle\">1 - specificity</text>\n";
    os << "<text transform=\"translate(18 " << y0 + side / 2
       << ") rotate(-90)\" text-anchor=\"middle\">sensitivity</text>\n";
    for (std::size_t m = 0; m < rocs.size(); ++m) {
        const char* color = colors[m % std::size(colors)];
        os << "<polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
        // Step curve: move horizontally, then vertically.
        const auto& r = rocs[m];
        for (std::size_t i = 0; i < r.fpr.size(); ++i) {
            if (i > 0) os << ' ' << px(r.fpr[i]) << ',' << py(r.tpr[i - 1]);
            os << (i ? " " : "") << px(r.fpr[i]) << ',' << py(r.tpr[i]);
        }
        os << "\"/>\n";
        std::snprintf(buf, sizeof buf, "%.3f", r.auc);
        os << "<text x=\"" << x0 + side + 12 << "\" y=\"" << y0 + 14 + 18.0 * static_cast<double>(m) << "\" fill=\""
           << color << "\">" << names[m] << " (AROC " << buf << ")</text>\n";
    }
    os << "</svg>\n";
    return os.str();
}

// --------------------------------------------------------------------------
// Small CSV reader for the report.

std::vector<std::map<std::string, std::string>> read_csv_rows(const fs::path& path) {
    std::ifstream in(path);
    std::string line;
    std::vector<std::map<std::string, std::string>> rows;
    if (!std::getline(in, line)) return rows;
    const auto split = [](const std::string& s) {
        std::vector<std::string> out;
        std::string cell;
        std::istringstream is(s);
        while (std::getline(is, cell, ',')) out.push_back(cell);
        if (!s.empty() && s.back() == ',') out.emplace_back();
        return out;
    };
    const auto header = split(line);
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto cells = split(line);
        std::map<std::string, std::string> row;
        for (std::size_t i = 0; i < header.size() && i < cells.size(); ++i) row[header[i]] = cells[i];
        rows.push_back(std::move(row));
    }
    return rows;
}

std::string fixed(const std::string& s, int digits) {
    if (s.empty()) return "";
    char* end = nullptr;
    const double v = std::strtod(s.c_str(), &end);
    if (end == s.c_str()) return s;
    if (std::isnan(v)) return "n/a";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

}  // namespace

// ---------------------------------------------------------------------------

RunConfig resolve_config(const GlobalOptions& opts, const std::optional<fs::path>& bundle_dir) {
    RunConfig cfg;
    if (opts.config) {
        cfg = load_run_config(*opts.config);
    } else if (bundle_dir) {
        const auto manifest = dir_nonempty(*bundle_dir / "manifest.json")
                                  ? json::parse(read_text(*bundle_dir / "manifest.json"))
                                  : json();
        if (manifest.contains("config")) cfg = run_config_from_json(manifest.at("config"));
    }
    if (opts.seed) cfg.seed = *opts.seed;
    cfg.validate();
    return cfg;
}

void cmd_gen(const GlobalOptions& opts) {
    if (opts.out.empty()) throw Error(ErrorKind::config, "gen needs --out <dir>");
    const auto cfg = resolve_config(opts, std::nullopt);
    const fs::path& dir = opts.out;
    if (dir_nonempty(dir)) {
        if (!opts.force) {
            throw Error(ErrorKind::precondition, "output directory " + dir.string() + " is not empty (use --force)");
        }
        if (!fs::is_directory(dir)) throw Error(ErrorKind::precondition, dir.string() + " is not a directory");
        clear_entries(dir, {"manifest.json", "records.csv", "config.json", "arrays", "grids", "normative"});
    }
    fs::create_directories(dir / "arrays");

    const auto plan = plan_cohort(cfg.cohort, cfg.phenotype, cfg.phantom, cfg.maps, cfg.seed);
    std::vector<std::pair<std::size_t, std::size_t>> jobs;
    for (std::size_t e = 0; e < plan.eyes.size(); ++e) {
        for (std::size_t s = 0; s < plan.eyes[e].scans.size(); ++s) jobs.emplace_back(e, s);
    }

    struct Slot {
        RecordRow row;
        ordered_json scan;
        ordered_json truth;
    };
    std::vector<Slot> slots(jobs.size());
    const std::size_t n_rings = cfg.maps.n_rings, n_angles = cfg.maps.n_angles;
    parallel_for(jobs.size(), opts.threads.value_or(1), [&](std::size_t j) {
        const auto [e, s] = jobs[j];
        const auto eye = render_scan(plan, e, s, cfg.maps, cfg.phantom);
        const auto id = scan_id(eye.record, eye.record.scan_index);
        auto& slot = slots[j];
        slot.row.scan_id = id;
        slot.row.record = eye.record;
        ordered_json arrays;
        const auto put = [&](const char* name, const std::vector<double>& values) {
            arrays[name] = to_json(write_array(dir, "arrays/" + id + "_" + name + ".f32", {n_rings, n_angles}, values));
        };
        put("nfl_band_sum", eye.profiles.nfl_band_sum.data());
        put("ppec_band_mean", eye.profiles.ppec_band_mean.data());
        put("nfl_thickness", eye.profiles.nfl_thickness.data());
        put("ring_vessel_mask", to_doubles(eye.ring_vessel_mask));
        slot.scan = {{"scan_id", id},
                     {"subject_id", eye.record.subject_id},
                     {"eye", to_string(eye.record.eye)},
                     {"scan_index", eye.record.scan_index},
                     {"group", to_string(eye.record.group)},
                     {"disc_offset_mm", {eye.disc_offset.first, eye.disc_offset.second}},
                     {"arrays", arrays}};
        slot.truth = {{"scan_id", id},
                      {"bias_amplitude_db", eye.bias_amplitude},
                      {"bias_phase", eye.bias_phase},
                      {"rnfl_flv_generated", eye.record.rnfl_flv}};
    });

    ordered_json manifest;
    manifest["format"] = bundle_format;
    manifest["generator"] = generator_version;
    manifest["seed"] = cfg.seed;
    manifest["config"] = to_json(cfg);
    manifest["geometry"] = {{"ring_diameters_mm", cfg.maps.ring_diameters()}, {"n_angles", cfg.maps.n_angles}};

    ordered_json subjects = ordered_json::array();
    ordered_json eyes_truth = ordered_json::array();
    std::map<std::string, std::size_t> subject_pos;
    for (const auto& pe : plan.eyes) {
        const auto& r = pe.model.record;
        if (!subject_pos.count(r.subject_id)) {
            subject_pos[r.subject_id] = subjects.size();
            subjects.push_back({{"subject_id", r.subject_id}, {"group", to_string(r.group)}, {"eyes", json::array()}});
        }
        subjects[subject_pos[r.subject_id]]["eyes"].push_back(to_string(r.eye));
        ordered_json defects = ordered_json::array();
        for (const auto& d : pe.model.defects) defects.push_back(defect_json(d));
        eyes_truth.push_back({{"subject_id", r.subject_id},
                              {"eye", to_string(r.eye)},
                              {"severity", pe.model.severity},
                              {"nflr_target_db", pe.model.nflr_target_db},
                              {"defects", defects}});
    }
    std::size_t n_normal = 0, n_pg = 0;
    for (const auto& s : subjects) (s["group"] == "normal" ? n_normal : n_pg)++;
    manifest["subject_counts"] = {{"normal", n_normal}, {"pg", n_pg}};
    manifest["subjects"] = subjects;

    ordered_json scans = ordered_json::array();
    ordered_json scans_truth = ordered_json::array();
    std::vector<RecordRow> rows;
    for (auto& s : slots) {
        scans.push_back(std::move(s.scan));
        scans_truth.push_back(std::move(s.truth));
        rows.push_back(std::move(s.row));
    }
    manifest["scans"] = scans;
    manifest["ground_truth"] = {{"eyes", eyes_truth}, {"scans", scans_truth}};

    write_text(dir / "records.csv", records_to_csv(rows));
    write_text(dir / "config.json", to_json(cfg).dump(2) + "\n");
    write_manifest(dir, manifest);
}

void cmd_maps(const GlobalOptions& opts, const fs::path& bundle_dir) {
    Bundle b = open_bundle(bundle_dir);
    const auto cfg = resolve_config(opts, bundle_dir);
    ensure_ring_geometry_matches(cfg.maps, b.manifest.at("config").at("maps"));
    const auto& geometry = cfg.maps;
    const auto ring_radii = [&] {
        auto d = geometry.ring_diameters();
        for (auto& x : d) x /= 2.0;
        return d;
    }();
    const auto dense_radii = geometry.dense_radii();
    const std::size_t threads = opts.threads.value_or(1);

    std::vector<ProcessedScan> processed(b.scans.size());
    parallel_for(b.scans.size(), threads, [&](std::size_t i) {
        const auto& s = b.scans[i];
        RingProfileSet p;
        p.ring_diameters = geometry.ring_diameters();
        const auto load = [&](const char* name) {
            const auto& ref = array_of(s, name);
            return grid_from<double>(read_array(b.dir, ref), ref);
        };
        p.nfl_band_sum = load("nfl_band_sum");
        p.ppec_band_mean = load("ppec_band_mean");
        p.nfl_thickness = load("nfl_thickness");
        const auto& mref = array_of(s, "ring_vessel_mask");
        const auto ring_mask = grid_from<std::uint8_t>(read_array(b.dir, mref), mref);
        p.validate();
        const auto mask = expand_ring_mask(ring_mask, ring_radii, dense_radii);
        processed[i] = process_scan(p, mask, s.disc_offset, geometry);
    });

    std::vector<SubjectRef> refs;
    for (const auto& s : b.scans) refs.push_back({s.subject_id, s.group == Group::pg ? 1 : 0});
    const auto split = subject_split(refs, cfg.evaluation.train_fraction, cfg.split_seed());

    std::vector<SuperpixelGrid> normal_thickness, normal_reflectance;
    for (std::size_t i = 0; i < b.scans.size(); ++i) {
        if (b.scans[i].group == Group::normal && split.of(b.scans[i].subject_id) == Fold::train) {
            normal_thickness.push_back(processed[i].thickness);
            normal_reflectance.push_back(processed[i].reflectance);
        }
    }
    const auto norm_t = fit_normative(normal_thickness);
    const auto norm_r = fit_normative(normal_reflectance);

    for (std::size_t i = 0; i < b.scans.size(); ++i) {
        auto& row = b.records[i];
        row.nflr_avg = grid_average(processed[i].reflectance);
        row.nflr_flv = focal_loss_volume(processed[i].reflectance, norm_r, FlvKind::reflectance_db);
        row.record.rnfl_flv = focal_loss_volume(processed[i].thickness, norm_t, FlvKind::thickness);
    }

    clear_entries(b.dir, {"grids", "normative"});
    const std::vector<std::size_t> dims{geometry.n_segments, geometry.n_tracks};
    std::vector<ordered_json> entries(b.scans.size());
    parallel_for(b.scans.size(), threads, [&](std::size_t i) {
        const auto& id = b.scans[i].scan_id;
        const auto& ps = processed[i];
        const auto put = [&](const char* name, const std::vector<double>& values) {
            entries[i][name] = to_json(write_array(b.dir, "grids/" + id + "_" + name + ".f32", dims, values));
        };
        put("thickness", ps.thickness.values.data());
        put("thickness_counts", to_doubles(ps.thickness.counts));
        put("reflectance", ps.reflectance.values.data());
        put("reflectance_counts", to_doubles(ps.reflectance.counts));
    });

    const auto norm_json = [&](const char* kind, const NormativeGrid& n) {
        const std::string base = std::string("normative/") + kind + "_";
        return ordered_json{{"mean", to_json(write_array(b.dir, base + "mean.f32", dims, n.mean.data()))},
                            {"sd", to_json(write_array(b.dir, base + "sd.f32", dims, n.sd.data()))},
                            {"cutoff", to_json(write_array(b.dir, base + "cutoff.f32", dims, n.cutoff.data()))}};
    };

    std::vector<std::string> train_subjects, test_subjects;
    for (const auto& [id, fold] : split.fold) (fold == Fold::train ? train_subjects : test_subjects).push_back(id);

    ordered_json processed_json;
    processed_json["split_seed"] = cfg.split_seed();
    processed_json["train_fraction"] = cfg.evaluation.train_fraction;
    processed_json["maps"] = to_json(cfg)["maps"];
    processed_json["train_subjects"] = train_subjects;
    processed_json["test_subjects"] = test_subjects;
    processed_json["normative_scans"] = normal_thickness.size();
    processed_json["normative"] = {{"thickness", norm_json("thickness", norm_t)},
                                   {"reflectance", norm_json("reflectance", norm_r)}};
    ordered_json scans;
    for (std::size_t i = 0; i < b.scans.size(); ++i) scans[b.scans[i].scan_id] = std::move(entries[i]);
    processed_json["scans"] = scans;
    b.manifest["processed"] = processed_json;

    write_text(b.dir / "records.csv", records_to_csv(b.records));
    write_manifest(b.dir, b.manifest);
}

namespace {

class ReadAuditScope {
public:
    explicit ReadAuditScope(std::vector<fs::path>* log) { set_read_audit(log); }
    ~ReadAuditScope() { set_read_audit(nullptr); }
    ReadAuditScope(const ReadAuditScope&) = delete;
    ReadAuditScope& operator=(const ReadAuditScope&) = delete;
};

}  // namespace

void cmd_train(const GlobalOptions& opts, const fs::path& bundle_dir, const TrainOptions& topts) {
    const auto& variant = topts.variant;
    if (std::find(model_variants.begin(), model_variants.end(), variant) == model_variants.end()) {
        throw Error(ErrorKind::config, "unknown variant '" + variant + "' (hybrid-2ch, hybrid-1ch, logit-a, logit-b)");
    }
    if (opts.out.empty()) throw Error(ErrorKind::config, "train needs --out <run dir>");
    ReadAuditScope audit(topts.read_audit);

    const Bundle b = open_bundle(bundle_dir);
    auto cfg = resolve_config(opts, bundle_dir);
    ensure_split_matches(b, cfg);

    const fs::path dir = opts.out / variant;
    if (dir_nonempty(dir)) {
        if (!opts.force) throw Error(ErrorKind::precondition, dir.string() + " already exists (use --force)");
        clear_entries(dir, {"checkpoint.json", "params.bin", "model.json", "history.csv", "config.json", "run.json"});
    }

    const auto train_idx = fold_scans(b, "train_subjects");
    const std::uint64_t seed = derive_seed(
        cfg.seed, {0x7ea1, static_cast<std::uint64_t>(std::find(model_variants.begin(), model_variants.end(), variant) -
                                                       model_variants.begin())});
    ordered_json run{{"variant", variant},
                     {"seed", cfg.seed},
                     {"model_seed", seed},
                     {"split_seed", cfg.split_seed()},
                     {"train_fraction", cfg.evaluation.train_fraction},
                     {"train_scans", train_idx.size()}};

    if (is_hybrid(variant)) {
        const std::size_t channels = variant == "hybrid-2ch" ? 2 : 1;
        if (cfg.channels_explicit && cfg.model.cnn_channels_in != channels) {
            throw Error(ErrorKind::config,
                        variant + (channels == 1 ? " is thickness-only; model.cnn_channels_in = 2 adds the reflectance channel"
                                                 : " needs both channels; model.cnn_channels_in is 1") +
                            " (set it to null or " + std::to_string(channels) + ")");
        }
        cfg.model.cnn_channels_in = channels;
        cfg.channels_explicit = true;
        auto tc = cfg.train;
        if (opts.threads) tc.threads = *opts.threads;

        std::vector<TrainSample> samples(train_idx.size());
        parallel_for(train_idx.size(), tc.threads, [&](std::size_t k) {
            const auto i = train_idx[k];
            samples[k] = {hybrid_example(b, i, channels), b.scans[i].subject_id};
        });
        const auto result = train(cfg.model, tc, samples, seed);
        save_checkpoint(dir, result.model, {variant, cfg.seed, cfg.split_seed(), tc.epochs});
        write_text(dir / "history.csv", history_to_csv(result.history));
        run["kind"] = "hybrid";
        run["validation_subjects"] = result.validation_subjects;
    } else {
        const auto fv = logit_variant(variant);
        std::vector<std::vector<double>> features;
        std::vector<int> labels;
        for (auto i : train_idx) {
            features.push_back(logistic_features(b.records[i], fv));
            labels.push_back(b.records[i].record.group == Group::pg ? 1 : 0);
        }
        const auto model = fit_logistic(features, labels, fv, cfg.logistic);
        fs::create_directories(dir);
        write_text(dir / "model.json", logistic_to_json(model));
        std::ostringstream h;
        h << "iteration,objective,max_change,halvings\n";
        for (const auto& s : model.trace) {
            h << s.iteration << ',' << format_double(s.objective) << ',' << format_double(s.max_change) << ','
              << s.halvings << '\n';
        }
        write_text(dir / "history.csv", h.str());
        run["kind"] = "logistic";
    }
    write_text(dir / "config.json", to_json(cfg).dump(2) + "\n");
    write_text(dir / "run.json", run.dump(2) + "\n");
}

void cmd_eval(const GlobalOptions& opts, const fs::path& bundle_dir, std::vector<fs::path> models) {
    if (opts.out.empty()) throw Error(ErrorKind::config, "eval needs --out <run dir>");
    const Bundle b = open_bundle(bundle_dir);
    const auto cfg = resolve_config(opts, bundle_dir);
    ensure_split_matches(b, cfg);
    const auto split_seed = bundle_split_seed(b);
    const auto& unit = cfg.evaluation.unit;

    if (models.empty()) {
        for (const auto& v : model_variants) {
            if (fs::exists(opts.out / v / "run.json")) models.push_back(opts.out / v);
        }
        if (models.empty()) {
            throw Error(ErrorKind::precondition, "no trained models under " + opts.out.string() + "; run `nflr train` first");
        }
    }

    const auto test_idx = fold_scans(b, "test_subjects");
    // Evaluation units: scans, or eyes with their scans' mean score.
    std::vector<std::vector<std::size_t>> units;
    if (unit == "eye") {
        std::map<std::pair<std::string, Eye>, std::size_t> pos;
        for (auto i : test_idx) {
            const auto key = std::make_pair(b.scans[i].subject_id, b.scans[i].eye);
            auto [it, fresh] = pos.try_emplace(key, units.size());
            if (fresh) units.emplace_back();
            units[it->second].push_back(i);
        }
    } else {
        for (auto i : test_idx) units.push_back({i});
    }
    std::vector<int> labels;
    for (const auto& u : units) labels.push_back(b.scans[u.front()].group == Group::pg ? 1 : 0);

    std::vector<std::string> names;
    std::vector<std::vector<double>> unit_scores;
    for (const auto& mdir : models) {
        std::uint64_t model_split = 0;
        const auto variant = read_run_variant(mdir, &model_split);
        if (model_split != split_seed) {
            throw Error(ErrorKind::precondition, mdir.string() + " was trained with split seed " +
                                                     std::to_string(model_split) + ", this bundle uses " +
                                                     std::to_string(split_seed));
        }
        std::vector<double> scan_scores(b.scans.size(), 0.0);
        if (is_hybrid(variant)) {
            CheckpointMeta meta;
            const auto model = load_checkpoint(mdir, &meta);
            if (meta.split_seed != split_seed) {
                throw Error(ErrorKind::precondition, "checkpoint split seed differs in " + mdir.string());
            }
            parallel_for(test_idx.size(), opts.threads.value_or(1), [&](std::size_t k) {
                const auto i = test_idx[k];
                scan_scores[i] = forward(model, hybrid_example(b, i, model.config.cnn_channels_in));
            });
        } else {
            const auto model = logistic_from_json(read_text(mdir / "model.json"));
            for (auto i : test_idx) {
                scan_scores[i] = predict_logistic(model, logistic_features(b.records[i], model.variant));
            }
        }
        std::vector<double> scores;
        for (const auto& u : units) {
            double s = 0.0;
            for (auto i : u) s += scan_scores[i];
            scores.push_back(s / static_cast<double>(u.size()));
        }
        std::string name = variant;
        for (int k = 2; std::find(names.begin(), names.end(), name) != names.end(); ++k) {
            name = variant + "#" + std::to_string(k);
        }
        names.push_back(name);
        unit_scores.push_back(std::move(scores));
    }

    fs::create_directories(opts.out);
    std::size_t n_pos = 0;
    for (int l : labels) n_pos += static_cast<std::size_t>(l);
    std::ostringstream metrics;
    metrics << "model,unit,split_seed,n,n_positive,n_negative,auc,sens_at_spec95,sens_at_spec95_degenerate,"
               "sens_at_spec99,sens_at_spec99_degenerate,threshold,accuracy,sensitivity,specificity\n";
    std::vector<RocResult> rocs;
    for (std::size_t m = 0; m < names.size(); ++m) {
        const auto& s = unit_scores[m];
        const auto roc = roc_curve(s, labels);
        const auto s95 = sensitivity_at_specificity(s, labels, 0.95);
        const auto s99 = sensitivity_at_specificity(s, labels, 0.99);
        const auto conf = confusion_at_threshold(s, labels, cfg.evaluation.threshold);
        metrics << names[m] << ',' << unit << ',' << split_seed << ',' << labels.size() << ',' << n_pos << ','
                << labels.size() - n_pos << ',' << format_double(roc.auc) << ',' << format_double(s95.sensitivity)
                << ',' << (s95.degenerate ? 1 : 0) << ',' << format_double(s99.sensitivity) << ','
                << (s99.degenerate ? 1 : 0) << ',' << format_double(cfg.evaluation.threshold) << ','
                << format_double(conf.accuracy) << ',' << format_double(conf.sensitivity) << ','
                << format_double(conf.specificity) << '\n';
        write_text(opts.out / ("roc_" + names[m] + ".csv"), roc_to_csv(roc, split_seed, unit));
        rocs.push_back(roc);
    }
    write_text(opts.out / "metrics.csv", metrics.str());

    ordered_json comparisons = ordered_json::array();
    for (std::size_t a = 0; a < names.size(); ++a) {
        for (std::size_t c = a + 1; c < names.size(); ++c) {
            const auto r = delong_test(unit_scores[a], unit_scores[c], labels);
            comparisons.push_back({{"model_a", names[a]},
                                   {"model_b", names[c]},
                                   {"auc_a", r.auc_a},
                                   {"auc_b", r.auc_b},
                                   {"difference", r.difference},
                                   {"variance", r.variance},
                                   {"z", r.z},
                                   {"p_value", r.p_value}});
        }
    }
    ordered_json cj{{"test", "delong"},
                    {"split_seed", split_seed},
                    {"unit", unit},
                    {"models", names},
                    {"comparisons", comparisons}};
    write_text(opts.out / "comparisons.json", cj.dump(2) + "\n");
    write_text(opts.out / "roc.svg", roc_svg(names, rocs, split_seed, unit));
    write_text(opts.out / "config.json", to_json(cfg).dump(2) + "\n");
}

void cmd_report(const fs::path& run_dir) {
    if (!fs::is_directory(run_dir)) throw Error(ErrorKind::precondition, "no run directory at " + run_dir.string());
    std::ostringstream md;
    md << "# nflr run report\n\n";
    md << "Run directory: `" << run_dir.filename().string() << "`\n\n";

    const auto metrics_path = run_dir / "metrics.csv";
    const bool have_metrics = fs::exists(metrics_path);
    const auto rows = have_metrics ? read_csv_rows(metrics_path) : std::vector<std::map<std::string, std::string>>{};
    if (!rows.empty()) {
        md << "Evaluation unit: " << rows.front().at("unit") << ", split seed " << rows.front().at("split_seed")
           << ", " << rows.front().at("n") << " test units (" << rows.front().at("n_positive") << " glaucoma, "
           << rows.front().at("n_negative") << " normal).\n\n";
    }

    md << "## Diagnostic accuracy\n\n";
    if (!have_metrics) md << "metrics.csv: MISSING (run `nflr eval`)\n\n";
    md << "| Model | AROC | Sens @ 95% spec | Sens @ 99% spec | Accuracy | Sensitivity | Specificity |\n";
    md << "|---|---|---|---|---|---|---|\n";
    std::set<std::string> shown;
    const auto emit = [&](const std::string& name) {
        const auto it = std::find_if(rows.begin(), rows.end(), [&](const auto& r) { return r.at("model") == name; });
        if (it == rows.end()) {
            md << "| " << name << " | MISSING | MISSING | MISSING | MISSING | MISSING | MISSING |\n";
            return;
        }
        const auto& r = *it;
        const auto flag = [&](const char* key) { return r.count(key) && r.at(key) == "1" ? " (trivial)" : ""; };
        md << "| " << name << " | " << fixed(r.at("auc"), 3) << " | " << fixed(r.at("sens_at_spec95"), 3)
           << flag("sens_at_spec95_degenerate") << " | " << fixed(r.at("sens_at_spec99"), 3)
           << flag("sens_at_spec99_degenerate") << " | " << fixed(r.at("accuracy"), 3) << " | "
           << fixed(r.at("sensitivity"), 3) << " | " << fixed(r.at("specificity"), 3) << " |\n";
    };
    for (const auto& v : model_variants) {
        emit(v);
        shown.insert(v);
    }
    for (const auto& r : rows) {
        if (!shown.count(r.at("model"))) {
            emit(r.at("model"));
            shown.insert(r.at("model"));
        }
    }
    md << "\nThreshold metrics use probability >= "
       << (rows.empty() ? std::string("0.5") : fixed(rows.front().at("threshold"), 2))
       << ". Sensitivities at fixed specificity are read off the empirical step ROC without interpolation.\n\n";

    md << "## Paired comparisons (DeLong)\n\n";
    const auto comp_path = run_dir / "comparisons.json";
    if (!fs::exists(comp_path)) {
        md << "comparisons.json: MISSING\n\n";
    } else {
        const auto cj = json::parse(read_text(comp_path));
        md << "| Model A | Model B | AROC difference | z | p | Verdict |\n|---|---|---|---|---|---|\n";
        for (const auto& c : cj.at("comparisons")) {
            const double p = c.at("p_value").get<double>();
            const double d = c.at("difference").get<double>();
            std::string verdict = "no significant difference";
            if (p < 0.05) verdict = (d > 0 ? c.at("model_a") : c.at("model_b")).get<std::string>() + " higher (p < 0.05)";
            char buf[96];
            std::snprintf(buf, sizeof buf, "%+.4f | %.3f | %.3g", d, c.at("z").get<double>(), p);
            md << "| " << c.at("model_a").get<std::string>() << " | " << c.at("model_b").get<std::string>() << " | "
               << buf << " | " << verdict << " |\n";
        }
        md << "\nScans from one subject are treated as independent in the DeLong variance.\n\n";
    }

    md << "## Configuration\n\n";
    const auto cfg_path = run_dir / "config.json";
    if (fs::exists(cfg_path)) {
        md << "```json\n" << read_text(cfg_path) << "```\n";
    } else {
        md << "config.json: MISSING\n";
    }
    write_text(run_dir / "report.md", md.str());
}

}  // namespace nflr
