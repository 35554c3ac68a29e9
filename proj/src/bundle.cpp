#include "nflr/bundle.hpp"

#include <charconv>
#include <cstdio>
#include <sstream>

#include "nflr/binary_io.hpp"
#include "nflr/error.hpp"
#include "nflr/layers.hpp"

namespace nflr {

using nlohmann::json;
using nlohmann::ordered_json;

std::size_t ArrayRef::element_count() const { return shape_size(dims); }

ordered_json to_json(const ArrayRef& a) {
    return {{"path", a.path}, {"dtype", "float32-le"}, {"dims", a.dims}, {"sha256", a.sha256}};
}

ArrayRef array_ref_from_json(const json& j) {
    ArrayRef a;
    a.path = j.at("path").get<std::string>();
    a.dims = j.at("dims").get<std::vector<std::size_t>>();
    a.sha256 = j.at("sha256").get<std::string>();
    if (j.value("dtype", "float32-le") != "float32-le") {
        throw Error(ErrorKind::validation, "unsupported dtype for " + a.path);
    }
    return a;
}

ArrayRef write_array(const std::filesystem::path& bundle_dir, const std::string& rel_path,
                     std::vector<std::size_t> dims, std::span<const double> values) {
    if (shape_size(dims) != values.size()) {
        throw Error(ErrorKind::validation, "array " + rel_path + " does not match its declared dims");
    }
    const auto bytes = encode_f32(values);
    const auto path = bundle_dir / rel_path;
    std::filesystem::create_directories(path.parent_path());
    write_file(path, bytes);
    return {rel_path, std::move(dims), sha256_hex(bytes)};
}

std::vector<double> read_array(const std::filesystem::path& bundle_dir, const ArrayRef& ref) {
    const auto path = bundle_dir / ref.path;
    const auto bytes = read_file(path);
    if (bytes.size() != 4 * ref.element_count()) {
        throw Error(ErrorKind::integrity, "array " + path.string() + " has " + std::to_string(bytes.size()) +
                                              " bytes, expected " + std::to_string(4 * ref.element_count()));
    }
    if (sha256_hex(bytes) != ref.sha256) {
        throw Error(ErrorKind::integrity, "content hash mismatch for " + path.string());
    }
    return decode_f32(bytes);
}

std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

namespace {

const std::vector<std::string> record_columns{
    "scan_id",  "subject_id", "eye",     "scan_index", "group",   "age",     "gender",   "axial_length",
    "vf_md",    "disc_area",  "rim_area", "cd_area_ratio", "vcdr", "gcc_sup", "gcc_inf", "gcc_flv",
    "rnfl_avg", "rnfl_flv",   "nflr_avg", "nflr_flv"};

std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cell;
    std::istringstream is(line);
    while (std::getline(is, cell, ',')) out.push_back(cell);
    if (!line.empty() && line.back() == ',') out.emplace_back();
    return out;
}

double parse_double(const std::string& s, const std::string& column, std::size_t line) {
    double v = 0.0;
    const auto* end = s.data() + s.size();
    auto [ptr, ec] = std::from_chars(s.data(), end, v);
    if (ec != std::errc() || ptr != end) {
        throw Error(ErrorKind::validation,
                    "records.csv line " + std::to_string(line) + ": bad value '" + s + "' in column " + column);
    }
    return v;
}

}  // namespace

std::string records_to_csv(const std::vector<RecordRow>& rows) {
    std::ostringstream os;
    for (std::size_t i = 0; i < record_columns.size(); ++i) os << (i ? "," : "") << record_columns[i];
    os << '\n';
    for (const auto& row : rows) {
        const auto& r = row.record;
        os << row.scan_id << ',' << r.subject_id << ',' << to_string(r.eye) << ',' << r.scan_index << ','
           << to_string(r.group) << ',' << format_double(r.age) << ',' << r.gender << ','
           << format_double(r.axial_length) << ',' << format_double(r.vf_md) << ',' << format_double(r.disc_area)
           << ',' << format_double(r.rim_area) << ',' << format_double(r.cd_area_ratio) << ','
           << format_double(r.vcdr) << ',' << format_double(r.gcc_sup) << ',' << format_double(r.gcc_inf) << ','
           << format_double(r.gcc_flv) << ',' << format_double(r.rnfl_avg) << ',' << format_double(r.rnfl_flv)
           << ',' << (row.nflr_avg ? format_double(*row.nflr_avg) : "") << ','
           << (row.nflr_flv ? format_double(*row.nflr_flv) : "") << '\n';
    }
    return os.str();
}

std::vector<RecordRow> records_from_csv(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    if (!std::getline(is, line)) throw Error(ErrorKind::validation, "records.csv is empty");
    const auto header = split_csv_line(line);
    std::map<std::string, std::size_t> col;
    for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
    for (const auto& name : record_columns) {
        if (!col.count(name)) throw Error(ErrorKind::validation, "records.csv lacks column " + name);
    }
    std::vector<RecordRow> rows;
    std::size_t line_no = 1;
    while (std::getline(is, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto cells = split_csv_line(line);
        if (cells.size() != header.size()) {
            throw Error(ErrorKind::validation, "records.csv line " + std::to_string(line_no) + " has " +
                                                   std::to_string(cells.size()) + " cells");
        }
        auto cell = [&](const char* name) -> const std::string& { return cells[col.at(name)]; };
        auto num = [&](const char* name) { return parse_double(cell(name), name, line_no); };
        RecordRow row;
        row.scan_id = cell("scan_id");
        auto& r = row.record;
        r.subject_id = cell("subject_id");
        r.eye = eye_from_string(cell("eye"));
        r.scan_index = static_cast<int>(num("scan_index"));
        r.group = group_from_string(cell("group"));
        r.age = num("age");
        r.gender = static_cast<int>(num("gender"));
        r.axial_length = num("axial_length");
        r.vf_md = num("vf_md");
        r.disc_area = num("disc_area");
        r.rim_area = num("rim_area");
        r.cd_area_ratio = num("cd_area_ratio");
        r.vcdr = num("vcdr");
        r.gcc_sup = num("gcc_sup");
        r.gcc_inf = num("gcc_inf");
        r.gcc_flv = num("gcc_flv");
        r.rnfl_avg = num("rnfl_avg");
        r.rnfl_flv = num("rnfl_flv");
        if (!cell("nflr_avg").empty()) row.nflr_avg = num("nflr_avg");
        if (!cell("nflr_flv").empty()) row.nflr_flv = num("nflr_flv");
        rows.push_back(std::move(row));
    }
    return rows;
}

std::size_t Bundle::index_of(const std::string& scan_id) const {
    for (std::size_t i = 0; i < scans.size(); ++i) {
        if (scans[i].scan_id == scan_id) return i;
    }
    throw Error(ErrorKind::validation, "scan " + scan_id + " is not in the bundle");
}

Bundle open_bundle(const std::filesystem::path& dir) {
    const auto manifest_path = dir / "manifest.json";
    if (!std::filesystem::exists(manifest_path)) {
        throw Error(ErrorKind::precondition, "no bundle at " + dir.string() + " (missing manifest.json)");
    }
    Bundle b;
    b.dir = dir;
    try {
        b.manifest = ordered_json::parse(read_text(manifest_path));
    } catch (const json::exception& e) {
        throw Error(ErrorKind::integrity, "cannot parse " + manifest_path.string() + ": " + e.what());
    }
    if (b.manifest.value("format", "") != bundle_format) {
        throw Error(ErrorKind::precondition, "unsupported bundle format in " + manifest_path.string());
    }
    for (const auto& s : b.manifest.at("scans")) {
        ScanEntry e;
        e.scan_id = s.at("scan_id").get<std::string>();
        e.subject_id = s.at("subject_id").get<std::string>();
        e.eye = eye_from_string(s.at("eye").get<std::string>());
        e.scan_index = s.at("scan_index").get<int>();
        e.group = group_from_string(s.at("group").get<std::string>());
        const auto off = s.at("disc_offset_mm").get<std::vector<double>>();
        if (off.size() != 2) throw Error(ErrorKind::integrity, "bad disc offset for " + e.scan_id);
        e.disc_offset = {off[0], off[1]};
        for (const auto& [name, ref] : s.at("arrays").items()) e.arrays[name] = array_ref_from_json(ref);
        b.scans.push_back(std::move(e));
    }
    b.records = records_from_csv(read_text(dir / "records.csv"));
    if (b.records.size() != b.scans.size()) {
        throw Error(ErrorKind::integrity, "records.csv and manifest list different scan counts");
    }
    for (std::size_t i = 0; i < b.scans.size(); ++i) {
        if (b.records[i].scan_id != b.scans[i].scan_id) {
            throw Error(ErrorKind::integrity, "records.csv row " + std::to_string(i + 1) + " is out of manifest order");
        }
    }
    return b;
}

void write_manifest(const std::filesystem::path& dir, const ordered_json& manifest) {
    write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

}  // namespace nflr
