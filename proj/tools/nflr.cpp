// nflr: phantom cohort generation, map processing, training, evaluation
// and reporting.
//
// Exit codes: 0 success, 1 runtime error, 2 precondition failure or refusal.

#include <cstdio>
#include <iostream>

#include "CLI11.hpp"
#include "nflr/binary_io.hpp"
#include "nflr/commands.hpp"
#include "nflr/error.hpp"

namespace {

int exit_code_for(nflr::ErrorKind kind) {
    switch (kind) {
        case nflr::ErrorKind::config:
        case nflr::ErrorKind::precondition:
            return 2;
        default:
            return 1;
    }
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"NFL reflectance and thickness glaucoma classification pipeline"};
    app.require_subcommand(1);
    app.fallthrough();

    nflr::GlobalOptions opts;
    std::string config_path;
    std::uint64_t seed = 0;
    std::string out;
    std::size_t threads = 1;
    app.add_option("--config", config_path, "Run configuration JSON")->check(CLI::ExistingFile);
    auto* seed_opt = app.add_option("--seed", seed, "Override the run seed");
    app.add_option("--out", out, "Output directory");
    app.add_flag("--force", opts.force, "Overwrite existing outputs");
    auto* threads_opt = app.add_option("--threads", threads, "Worker threads")->check(CLI::PositiveNumber);

    auto* gen = app.add_subcommand("gen", "Generate a phantom cohort bundle into --out");

    std::string bundle;
    auto* maps = app.add_subcommand("maps", "Process a bundle's ring profiles into superpixel grids");
    maps->add_option("bundle", bundle, "Bundle directory")->required();

    std::string variant;
    std::string audit_path;
    auto* train = app.add_subcommand("train", "Train one model variant into --out/<variant>");
    train->add_option("bundle", bundle, "Bundle directory")->required();
    train->add_option("--variant", variant, "hybrid-2ch, hybrid-1ch, logit-a or logit-b")->required();
    train->add_option("--audit-reads", audit_path, "Write every file read during training to this file");

    std::vector<std::string> model_dirs;
    auto* eval = app.add_subcommand("eval", "Evaluate trained models on the test fold into --out");
    eval->add_option("bundle", bundle, "Bundle directory")->required();
    eval->add_option("models", model_dirs, "Model directories (default: every variant under --out)");

    std::string run_dir;
    auto* report = app.add_subcommand("report", "Summarize an evaluated run directory as report.md");
    report->add_option("run_dir", run_dir, "Run directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    if (!config_path.empty()) opts.config = config_path;
    if (*seed_opt) opts.seed = seed;
    if (*threads_opt) opts.threads = threads;
    opts.out = out;

    try {
        if (*gen) {
            nflr::cmd_gen(opts);
        } else if (*maps) {
            nflr::cmd_maps(opts, bundle);
        } else if (*train) {
            std::vector<std::filesystem::path> reads;
            nflr::TrainOptions topts{variant, audit_path.empty() ? nullptr : &reads};
            nflr::cmd_train(opts, bundle, topts);
            if (!audit_path.empty()) {
                std::string text;
                for (const auto& p : reads) text += p.string() + "\n";
                nflr::write_text(audit_path, text);
            }
        } else if (*eval) {
            std::vector<std::filesystem::path> dirs(model_dirs.begin(), model_dirs.end());
            nflr::cmd_eval(opts, bundle, dirs);
        } else if (*report) {
            nflr::cmd_report(run_dir);
        }
    } catch (const nflr::Error& e) {
        std::cerr << "nflr: " << e.what() << "\n";
        return exit_code_for(e.kind());
    } catch (const std::exception& e) {
        std::cerr << "nflr: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
