#include "nflr/config.hpp"

#include <set>

#include "nflr/binary_io.hpp"
#include "nflr/error.hpp"

namespace nflr {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

// Reads keys from one JSON object and reports any it did not consume.
class Section {
public:
    Section(const json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw Error(ErrorKind::config, path_ + " must be a JSON object");
    }

    template <typename T>
    void get(const std::string& key, T& out) {
        auto it = j_.find(key);
        if (it == j_.end()) return;
        used_.insert(key);
        try {
            out = it->get<T>();
        } catch (const json::exception& e) {
            throw Error(ErrorKind::config, path_ + "." + key + ": " + e.what());
        }
    }

    const json* sub(const std::string& key) {
        auto it = j_.find(key);
        if (it == j_.end()) return nullptr;
        used_.insert(key);
        return &*it;
    }

    std::string path(const std::string& key) const { return path_ + "." + key; }

    void finish() const {
        for (const auto& [k, v] : j_.items()) {
            if (!used_.count(k)) throw Error(ErrorKind::config, "unknown config key " + path_ + "." + k);
        }
    }

private:
    const json& j_;
    std::string path_;
    std::set<std::string> used_;
};

ordered_json to_json(const FieldDistribution& d) {
    return {{"mean", d.mean}, {"sd", d.sd}, {"lo", d.lo}, {"hi", d.hi}};
}

ordered_json to_json(const GroupPhenotype& g) {
    ordered_json j;
    for (std::size_t i = 0; i < field_count; ++i) j[field_name(static_cast<Field>(i))] = to_json(g.fields[i]);
    return j;
}

void read_group(const json& j, const std::string& path, GroupPhenotype& g) {
    Section s(j, path);
    for (std::size_t i = 0; i < field_count; ++i) {
        const std::string name = field_name(static_cast<Field>(i));
        if (const json* fj = s.sub(name)) {
            Section f(*fj, s.path(name));
            auto& d = g.fields[i];
            f.get("mean", d.mean);
            f.get("sd", d.sd);
            f.get("lo", d.lo);
            f.get("hi", d.hi);
            f.finish();
        }
    }
    s.finish();
}

std::string to_string(TrajectoryKind k) { return k == TrajectoryKind::radial ? "radial" : "arcuate"; }

TrajectoryKind trajectory_from_string(const std::string& s) {
    if (s == "radial") return TrajectoryKind::radial;
    if (s == "arcuate") return TrajectoryKind::arcuate;
    throw Error(ErrorKind::config, "unknown trajectory kind '" + s + "'");
}

}  // namespace

void EvaluationConfig::validate() const {
    if (!(train_fraction > 0.0 && train_fraction <= 1.0)) {
        throw Error(ErrorKind::config, "evaluation.train_fraction must lie in (0, 1]");
    }
    if (unit != "scan" && unit != "eye") throw Error(ErrorKind::config, "evaluation.unit must be 'scan' or 'eye'");
}

void RunConfig::validate() const {
    cohort.validate();
    phenotype.validate();
    phantom.validate();
    maps.validate();
    model.validate();
    train.validate();
    evaluation.validate();
    if (model.grid_height != maps.n_segments || model.grid_width != maps.n_tracks) {
        throw Error(ErrorKind::config, "model grid size must equal the superpixel grid (n_segments x n_tracks)");
    }
    if (model.fcn_inputs != fcn_input_count) {
        throw Error(ErrorKind::config, "model.fcn_inputs must be " + std::to_string(fcn_input_count));
    }
    if (model.cnn_channels_in != 1 && model.cnn_channels_in != 2) {
        throw Error(ErrorKind::config, "model.cnn_channels_in must be 1 or 2");
    }
    if (!(logistic.lambda >= 0.0) || logistic.max_iterations < 1 || !(logistic.tolerance > 0.0)) {
        throw Error(ErrorKind::config, "invalid logistic settings");
    }
}

ordered_json to_json(const ModelConfig& c) {
    return {{"cnn_channels_in", c.cnn_channels_in},
            {"grid_height", c.grid_height},
            {"grid_width", c.grid_width},
            {"conv_channels", c.conv_channels},
            {"kernel", c.kernel},
            {"cnn_embed_dim", c.cnn_embed_dim},
            {"fcn_inputs", c.fcn_inputs},
            {"fcn_hidden", c.fcn_hidden},
            {"fusion_hidden", c.fusion_hidden},
            {"activation", c.activation == Activation::relu ? "relu" : "identity"}};
}

namespace {

void read_model(const json& j, const std::string& path, ModelConfig& c) {
    Section s(j, path);
    s.get("cnn_channels_in", c.cnn_channels_in);
    s.get("grid_height", c.grid_height);
    s.get("grid_width", c.grid_width);
    s.get("conv_channels", c.conv_channels);
    s.get("kernel", c.kernel);
    s.get("cnn_embed_dim", c.cnn_embed_dim);
    s.get("fcn_inputs", c.fcn_inputs);
    s.get("fcn_hidden", c.fcn_hidden);
    s.get("fusion_hidden", c.fusion_hidden);
    std::string act = c.activation == Activation::relu ? "relu" : "identity";
    s.get("activation", act);
    if (act == "relu") {
        c.activation = Activation::relu;
    } else if (act == "identity") {
        c.activation = Activation::identity;
    } else {
        throw Error(ErrorKind::config, s.path("activation") + ": unknown activation '" + act + "'");
    }
    s.finish();
}

}  // namespace

ModelConfig model_config_from_json(const json& j) {
    ModelConfig c;
    read_model(j, "model", c);
    return c;
}

ordered_json to_json(const RunConfig& c) {
    ordered_json j;
    j["seed"] = c.seed;
    j["cohort"] = {{"n_normal_subjects", c.cohort.n_normal_subjects},
                   {"n_pg_subjects", c.cohort.n_pg_subjects},
                   {"normal_single_eye_fraction", c.cohort.normal_single_eye_fraction},
                   {"pg_single_eye_fraction", c.cohort.pg_single_eye_fraction},
                   {"normal_three_scan_fraction", c.cohort.normal_three_scan_fraction},
                   {"pg_three_scan_fraction", c.cohort.pg_three_scan_fraction},
                   {"moment_match", c.cohort.moment_match}};
    j["phenotype"] = {{"normal", to_json(c.phenotype.normal)}, {"pg", to_json(c.phenotype.pg)}};
    const auto& p = c.phantom;
    j["phantom"] = {{"thickness_noise_um", p.thickness_noise_um},
                    {"reflectance_noise_db", p.reflectance_noise_db},
                    {"max_disc_offset_mm", p.max_disc_offset_mm},
                    {"max_bias_db", p.max_bias_db},
                    {"min_vessels", p.min_vessels},
                    {"max_vessels", p.max_vessels},
                    {"vessel_reflectance_drop_db", p.vessel_reflectance_drop_db},
                    {"vessel_thickness_gain_um", p.vessel_thickness_gain_um},
                    {"rotation_sd", p.rotation_sd},
                    {"bundle_width_mean", p.bundle_width_mean},
                    {"bundle_width_sd", p.bundle_width_sd},
                    {"bundle_gain_mean", p.bundle_gain_mean},
                    {"bundle_gain_sd", p.bundle_gain_sd},
                    {"ripple_sd", p.ripple_sd},
                    {"defect_depth_thickness_base", p.defect_depth_thickness_base},
                    {"defect_depth_thickness_slope", p.defect_depth_thickness_slope},
                    {"defect_depth_reflectance_base", p.defect_depth_reflectance_base},
                    {"defect_depth_reflectance_slope", p.defect_depth_reflectance_slope},
                    {"defect_width_base", p.defect_width_base},
                    {"defect_width_slope", p.defect_width_slope},
                    {"second_defect_severity", p.second_defect_severity},
                    {"calibrate_after_defects", p.calibrate_after_defects}};
    const auto& m = c.maps;
    j["maps"] = {{"n_rings", m.n_rings},
                 {"ring_min_diameter", m.ring_min_diameter},
                 {"ring_max_diameter", m.ring_max_diameter},
                 {"n_radii", m.n_radii},
                 {"n_angles", m.n_angles},
                 {"annulus_inner_diameter", m.annulus.inner_diameter},
                 {"annulus_outer_diameter", m.annulus.outer_diameter},
                 {"trajectory", to_string(m.trajectory.kind)},
                 {"curvature", m.trajectory.curvature},
                 {"n_tracks", m.n_tracks},
                 {"n_segments", m.n_segments}};
    j["model"] = to_json(c.model);
    if (!c.channels_explicit) j["model"]["cnn_channels_in"] = nullptr;
    j["train"] = {{"batch_size", c.train.batch_size},
                  {"epochs", c.train.epochs},
                  {"learning_rate", c.train.adam.learning_rate},
                  {"beta1", c.train.adam.beta1},
                  {"beta2", c.train.adam.beta2},
                  {"epsilon", c.train.adam.epsilon},
                  {"validation_split", c.train.validation_split},
                  {"threads", c.train.threads}};
    j["logistic"] = {{"lambda", c.logistic.lambda},
                     {"max_iterations", c.logistic.max_iterations},
                     {"tolerance", c.logistic.tolerance}};
    j["evaluation"] = {{"train_fraction", c.evaluation.train_fraction},
                       {"split_seed", c.evaluation.split_seed ? json(*c.evaluation.split_seed) : json(nullptr)},
                       {"threshold", c.evaluation.threshold},
                       {"unit", c.evaluation.unit}};
    return j;
}

RunConfig run_config_from_json(const json& j) {
    RunConfig c;
    Section root(j, "config");
    root.get("seed", c.seed);
    if (const json* s = root.sub("cohort")) {
        Section x(*s, "cohort");
        x.get("n_normal_subjects", c.cohort.n_normal_subjects);
        x.get("n_pg_subjects", c.cohort.n_pg_subjects);
        x.get("normal_single_eye_fraction", c.cohort.normal_single_eye_fraction);
        x.get("pg_single_eye_fraction", c.cohort.pg_single_eye_fraction);
        x.get("normal_three_scan_fraction", c.cohort.normal_three_scan_fraction);
        x.get("pg_three_scan_fraction", c.cohort.pg_three_scan_fraction);
        x.get("moment_match", c.cohort.moment_match);
        x.finish();
    }
    if (const json* s = root.sub("phenotype")) {
        Section x(*s, "phenotype");
        if (const json* g = x.sub("normal")) read_group(*g, "phenotype.normal", c.phenotype.normal);
        if (const json* g = x.sub("pg")) read_group(*g, "phenotype.pg", c.phenotype.pg);
        x.finish();
    }
    if (const json* s = root.sub("phantom")) {
        Section x(*s, "phantom");
        auto& p = c.phantom;
        x.get("thickness_noise_um", p.thickness_noise_um);
        x.get("reflectance_noise_db", p.reflectance_noise_db);
        x.get("max_disc_offset_mm", p.max_disc_offset_mm);
        x.get("max_bias_db", p.max_bias_db);
        x.get("min_vessels", p.min_vessels);
        x.get("max_vessels", p.max_vessels);
        x.get("vessel_reflectance_drop_db", p.vessel_reflectance_drop_db);
        x.get("vessel_thickness_gain_um", p.vessel_thickness_gain_um);
        x.get("rotation_sd", p.rotation_sd);
        x.get("bundle_width_mean", p.bundle_width_mean);
        x.get("bundle_width_sd", p.bundle_width_sd);
        x.get("bundle_gain_mean", p.bundle_gain_mean);
        x.get("bundle_gain_sd", p.bundle_gain_sd);
        x.get("ripple_sd", p.ripple_sd);
        x.get("defect_depth_thickness_base", p.defect_depth_thickness_base);
        x.get("defect_depth_thickness_slope", p.defect_depth_thickness_slope);
        x.get("defect_depth_reflectance_base", p.defect_depth_reflectance_base);
        x.get("defect_depth_reflectance_slope", p.defect_depth_reflectance_slope);
        x.get("defect_width_base", p.defect_width_base);
        x.get("defect_width_slope", p.defect_width_slope);
        x.get("second_defect_severity", p.second_defect_severity);
        x.get("calibrate_after_defects", p.calibrate_after_defects);
        x.finish();
    }
    if (const json* s = root.sub("maps")) {
        Section x(*s, "maps");
        auto& m = c.maps;
        x.get("n_rings", m.n_rings);
        x.get("ring_min_diameter", m.ring_min_diameter);
        x.get("ring_max_diameter", m.ring_max_diameter);
        x.get("n_radii", m.n_radii);
        x.get("n_angles", m.n_angles);
        x.get("annulus_inner_diameter", m.annulus.inner_diameter);
        x.get("annulus_outer_diameter", m.annulus.outer_diameter);
        std::string kind = to_string(m.trajectory.kind);
        x.get("trajectory", kind);
        m.trajectory.kind = trajectory_from_string(kind);
        x.get("curvature", m.trajectory.curvature);
        x.get("n_tracks", m.n_tracks);
        x.get("n_segments", m.n_segments);
        x.finish();
    }
    if (const json* s = root.sub("model")) {
        json m = *s;
        if (m.is_object() && m.contains("cnn_channels_in")) {
            if (m["cnn_channels_in"].is_null()) {
                m.erase("cnn_channels_in");
            } else {
                c.channels_explicit = true;
            }
        }
        read_model(m, "model", c.model);
    }
    if (const json* s = root.sub("train")) {
        Section x(*s, "train");
        x.get("batch_size", c.train.batch_size);
        x.get("epochs", c.train.epochs);
        x.get("learning_rate", c.train.adam.learning_rate);
        x.get("beta1", c.train.adam.beta1);
        x.get("beta2", c.train.adam.beta2);
        x.get("epsilon", c.train.adam.epsilon);
        x.get("validation_split", c.train.validation_split);
        x.get("threads", c.train.threads);
        x.finish();
    }
    if (const json* s = root.sub("logistic")) {
        Section x(*s, "logistic");
        x.get("lambda", c.logistic.lambda);
        x.get("max_iterations", c.logistic.max_iterations);
        x.get("tolerance", c.logistic.tolerance);
        x.finish();
    }
    if (const json* s = root.sub("evaluation")) {
        Section x(*s, "evaluation");
        x.get("train_fraction", c.evaluation.train_fraction);
        if (const json* seed = x.sub("split_seed")) {
            if (seed->is_null()) {
                c.evaluation.split_seed.reset();
            } else if (seed->is_number_unsigned()) {
                c.evaluation.split_seed = seed->get<std::uint64_t>();
            } else {
                throw Error(ErrorKind::config, "evaluation.split_seed must be a nonnegative integer or null");
            }
        }
        x.get("threshold", c.evaluation.threshold);
        x.get("unit", c.evaluation.unit);
        x.finish();
    }
    root.finish();
    c.validate();
    return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    json j;
    try {
        j = json::parse(read_text(path));
    } catch (const json::exception& e) {
        throw Error(ErrorKind::config, "cannot parse " + path.string() + ": " + e.what());
    }
    return run_config_from_json(j);
}

}  // namespace nflr
