#include "doctest.h"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "nflr/bundle.hpp"
#include "nflr/commands.hpp"
#include "nflr/config.hpp"
#include "nflr/error.hpp"

using namespace nflr;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const auto p = fs::temp_directory_path() / ("nflr_test_cli_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    std::ostringstream s;
    s << in.rdbuf();
    return s.str();
}

void spit(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    out << text;
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(NFLR_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

// Small cohort and a short schedule so the whole pipeline runs in seconds.
fs::path tiny_config(const fs::path& dir) {
    const auto p = dir / "tiny.json";
    spit(p, R"({"cohort": {"n_normal_subjects": 10, "n_pg_subjects": 12},
               "train": {"epochs": 2}})");
    return p;
}

GlobalOptions options(const fs::path& cfg, const fs::path& out) {
    GlobalOptions o;
    o.config = cfg;
    o.out = out;
    o.threads = 1;
    return o;
}

// One shared pipeline for the tests that need trained models.
struct Pipeline {
    fs::path root, cfg, bundle, run;

    Pipeline() {
        root = scratch("pipeline");
        cfg = tiny_config(root);
        bundle = root / "bundle";
        run = root / "run";
        cmd_gen(options(cfg, bundle));
        cmd_maps(options(cfg, bundle), bundle);
        for (const auto& v : model_variants) cmd_train(options(cfg, run), bundle, {v, nullptr});
    }
};

const Pipeline& pipeline() {
    static const Pipeline p;
    return p;
}

}  // namespace

TEST_CASE("config rejects unknown keys and echoes round trip") {
    nlohmann::json j = {{"cohort", {{"n_normal_subjects", 3}}}, {"colour", 1}};
    CHECK_THROWS_AS(run_config_from_json(j), Error);
    nlohmann::json nested = {{"train", {{"epochz", 3}}}};
    try {
        run_config_from_json(nested);
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::config);
        CHECK(std::string(e.what()).find("epochz") != std::string::npos);
    }

    RunConfig cfg;
    cfg.seed = 99;
    cfg.train.epochs = 7;
    cfg.evaluation.unit = "eye";
    const auto echoed = to_json(cfg);
    const auto back = run_config_from_json(nlohmann::json::parse(echoed.dump()));
    CHECK(to_json(back).dump() == echoed.dump());
    CHECK(!back.channels_explicit);

    auto explicit_channels = nlohmann::json::parse(echoed.dump());
    explicit_channels["model"]["cnn_channels_in"] = 1;
    CHECK(run_config_from_json(explicit_channels).channels_explicit);
}

TEST_CASE("records csv round trip") {
    RecordRow a;
    a.scan_id = "N001_OD_1";
    a.record.subject_id = "N001";
    a.record.age = 61.25;
    a.record.gcc_flv = 0.1 + 0.2;
    a.nflr_avg = -8.123456789012345;
    RecordRow b = a;
    b.scan_id = "N001_OD_2";
    b.record.scan_index = 2;
    b.nflr_avg.reset();
    const auto rows = records_from_csv(records_to_csv({a, b}));
    REQUIRE(rows.size() == 2);
    CHECK(rows[0].record.gcc_flv == a.record.gcc_flv);
    CHECK(rows[0].nflr_avg == a.nflr_avg);
    CHECK(!rows[1].nflr_avg);
    CHECK(!rows[1].nflr_flv);
    CHECK(rows[1].record.scan_index == 2);
    CHECK_THROWS_AS(records_from_csv("scan_id,nope\n"), Error);
}

TEST_CASE("corrupted arrays are reported by name") {
    const auto dir = scratch("arrays");
    const std::vector<double> v{1.0, 2.5, -3.0, 4.0, 5.0, 6.0};
    const auto ref = write_array(dir, "arrays/x.f32", {2, 3}, v);
    CHECK(read_array(dir, ref) == v);
    auto bytes = slurp(dir / ref.path);
    bytes[5] ^= 0x10;
    spit(dir / ref.path, bytes);
    try {
        read_array(dir, ref);
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::integrity);
        CHECK(std::string(e.what()).find("x.f32") != std::string::npos);
    }
    spit(dir / ref.path, bytes.substr(4));
    CHECK_THROWS_AS(read_array(dir, ref), Error);
}

TEST_CASE("gen refuses a non-empty output without --force") {
    const auto dir = scratch("refuse");
    const auto cfg = tiny_config(dir);
    const auto out = dir / "bundle";
    fs::create_directories(out);
    spit(out / "keep.txt", "mine");
    CHECK(run_cli("gen --config " + cfg.string() + " --out " + out.string()) == 2);
    CHECK(!fs::exists(out / "manifest.json"));
    CHECK(run_cli("gen --config " + cfg.string() + " --out " + out.string() + " --force") == 0);
    CHECK(fs::exists(out / "manifest.json"));
    CHECK(slurp(out / "keep.txt") == "mine");
    CHECK(run_cli("gen --bogus-flag") == 2);
    CHECK(run_cli("maps " + (dir / "nowhere").string()) == 2);
    CHECK(run_cli("train " + out.string() + " --variant logit-a --out " + (dir / "run").string()) == 2);
}

TEST_CASE("gen is deterministic for a seed") {
    const auto dir = scratch("determinism");
    const auto cfg = tiny_config(dir);
    cmd_gen(options(cfg, dir / "a"));
    cmd_gen(options(cfg, dir / "b"));
    auto other = options(cfg, dir / "c");
    other.seed = 12345;
    cmd_gen(other);
    CHECK(slurp(dir / "a" / "manifest.json") == slurp(dir / "b" / "manifest.json"));
    CHECK(slurp(dir / "a" / "records.csv") == slurp(dir / "b" / "records.csv"));
    CHECK(slurp(dir / "a" / "records.csv") != slurp(dir / "c" / "records.csv"));
}

TEST_CASE("train reads nothing from the test fold") {
    const auto& p = pipeline();
    const auto b = open_bundle(p.bundle);
    std::set<std::string> test_subjects;
    for (const auto& s : b.manifest.at("processed").at("test_subjects")) test_subjects.insert(s.get<std::string>());
    REQUIRE(!test_subjects.empty());
    std::set<std::string> test_scans;
    for (const auto& s : b.scans) {
        if (test_subjects.count(s.subject_id)) test_scans.insert(s.scan_id);
    }

    for (const auto& v : model_variants) {
        std::vector<fs::path> audit;
        auto o = options(p.cfg, p.root / "audit");
        o.force = true;
        cmd_train(o, p.bundle, {v, &audit});
        CHECK(!audit.empty());
        for (const auto& path : audit) {
            const auto name = path.filename().string();
            for (const auto& id : test_scans) CHECK_MESSAGE(name.rfind(id + "_", 0) != 0, v << " read " << name);
        }
    }
}

TEST_CASE("training refuses mismatched splits and channel counts") {
    const auto& p = pipeline();
    auto o = options(p.cfg, p.root / "mismatch");
    o.seed = 4242;
    try {
        cmd_train(o, p.bundle, {"logit-a", nullptr});
        FAIL("expected a refusal");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::precondition);
    }

    const auto cfg2 = p.root / "two.json";
    spit(cfg2, R"({"cohort": {"n_normal_subjects": 10, "n_pg_subjects": 12},
                  "train": {"epochs": 2}, "model": {"cnn_channels_in": 2}})");
    try {
        cmd_train(options(cfg2, p.root / "two"), p.bundle, {"hybrid-1ch", nullptr});
        FAIL("expected a config error");
    } catch (const Error& e) {
        CHECK(e.kind() == ErrorKind::config);
    }

    auto again = options(p.cfg, p.run);
    CHECK_THROWS_AS(cmd_train(again, p.bundle, {"logit-a", nullptr}), Error);
    CHECK_THROWS_AS(cmd_train(options(p.cfg, p.root / "x"), p.bundle, {"hybrid-3ch", nullptr}), Error);
}

TEST_CASE("eval writes metrics, curves and comparisons; eval refuses a different split") {
    const auto& p = pipeline();
    cmd_eval(options(p.cfg, p.run), p.bundle, {});
    const auto metrics = slurp(p.run / "metrics.csv");
    for (const auto& v : model_variants) {
        CHECK(metrics.find("\n" + v + ",") != std::string::npos);
        CHECK(fs::exists(p.run / ("roc_" + v + ".csv")));
    }
    const auto cj = nlohmann::json::parse(slurp(p.run / "comparisons.json"));
    CHECK(cj.at("comparisons").size() == 6);
    const auto svg = slurp(p.run / "roc.svg");
    CHECK(svg.rfind("<svg", 0) == 0);
    CHECK(svg.find("AROC") != std::string::npos);

    const auto roc = slurp(p.run / "roc_logit-a.csv");
    CHECK(roc.find("\ninf,0,0,") != std::string::npos);
    CHECK(roc.find(",1,1,") != std::string::npos);

    auto other = options(p.cfg, p.root / "eval_other");
    other.seed = 4242;
    CHECK_THROWS_AS(cmd_eval(other, p.bundle, {}), Error);
}

TEST_CASE("a model compared with itself has p = 1") {
    const auto& p = pipeline();
    const auto out = p.root / "self";
    cmd_eval(options(p.cfg, out), p.bundle, {p.run / "logit-a", p.run / "logit-a"});
    const auto cj = nlohmann::json::parse(slurp(out / "comparisons.json"));
    REQUIRE(cj.at("comparisons").size() == 1);
    CHECK(cj.at("comparisons")[0].at("p_value").get<double>() == 1.0);
    CHECK(cj.at("comparisons")[0].at("model_b").get<std::string>() == "logit-a#2");
}

TEST_CASE("report marks missing models and still succeeds") {
    const auto& p = pipeline();
    const auto out = p.root / "partial";
    cmd_eval(options(p.cfg, out), p.bundle, {p.run / "logit-a", p.run / "hybrid-2ch"});
    CHECK(run_cli("report " + out.string()) == 0);
    const auto md = slurp(out / "report.md");
    CHECK(md.find("| logit-b | MISSING") != std::string::npos);
    CHECK(md.find("| hybrid-1ch | MISSING") != std::string::npos);
    CHECK(md.find("| logit-a | MISSING") == std::string::npos);
    CHECK(run_cli("report " + (p.root / "absent").string()) == 2);
}
