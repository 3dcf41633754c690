// Command-line front end: build-zoo, calibrate, scan, remove, report.
// Exit codes: 0 success, 2 config/usage, 3 training failure, 4 scan/removal failure.

#include <CLI11.hpp>

#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include "dbs/harness.hpp"

namespace {

namespace h = dbs::harness;

struct Options {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> jobs;
    std::string method;
    std::string out;
};

h::RunConfig load(const Options& o) {
    auto cfg = o.config.empty() ? h::RunConfig{} : h::load_run_config(o.config);
    if (o.seed) cfg.seed = *o.seed;
    if (!o.out.empty()) cfg.out = o.out;
    return cfg;
}

std::vector<std::string> methods(const Options& o, const h::RunConfig& cfg) {
    return o.method.empty() ? cfg.methods : h::parse_methods(o.method);
}

void add_common(CLI::App* cmd, Options& o, bool with_method) {
    cmd->add_option("--config", o.config, "run configuration file")->check(CLI::ExistingFile);
    cmd->add_option("--seed", o.seed, "seed (overrides [global] seed; after build-zoo it only seeds the search)");
    cmd->add_option("--jobs", o.jobs, "worker threads (default: available cores)")->check(CLI::PositiveNumber);
    cmd->add_option("--out", o.out, "run directory (overrides [global] out)");
    if (with_method) {
        cmd->add_option("--method", o.method,
                        "comma-separated methods: dbs, no-constraint, ascc, uat, ga, dbs-no-ts, dbs-no-bt");
    }
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Backdoor planting, trigger inversion and removal for small text classifiers"};
    app.require_subcommand(1);
    Options o;
    auto* build = app.add_subcommand("build-zoo", "train the benign and trojaned model zoo");
    auto* calibrate = app.add_subcommand("calibrate", "derive detection thresholds on a quarter of each zoo");
    auto* scan = app.add_subcommand("scan", "scan every zoo model for a backdoor");
    auto* remove = app.add_subcommand("remove", "unlearn backdoors of flagged models");
    auto* report = app.add_subcommand("report", "aggregate scan results into metrics");
    add_common(build, o, false);
    add_common(calibrate, o, true);
    add_common(scan, o, true);
    add_common(remove, o, true);
    add_common(report, o, false);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    const auto log = h::stderr_log();
    try {
        const auto cfg = load(o);
        const std::filesystem::path dir = cfg.out;
        const std::size_t jobs = o.jobs.value_or(h::default_jobs());
        if (build->parsed()) {
            h::build_zoo(cfg, dir, jobs, log);
        } else if (calibrate->parsed()) {
            for (const auto& m : methods(o, cfg)) {
                const auto cal = h::calibrate(cfg, dir, m, cfg.seed, jobs, log);
                for (const auto& [zoo, v] : cal["zoos"].items())
                    log("[calibrate] " + m + " " + zoo + " beta=" + v["beta"].dump() + " acc=" + v["accuracy"].dump());
            }
        } else if (scan->parsed()) {
            for (const auto& m : methods(o, cfg)) h::scan(cfg, dir, m, cfg.seed, jobs, log);
        } else if (remove->parsed()) {
            const auto m = methods(o, cfg);
            if (m.size() != 1) throw dbs::ConfigError("remove takes exactly one method");
            const auto rep = h::remove_backdoors(cfg, dir, m.front(), cfg.seed, jobs, log);
            if (!rep["mean"].is_null()) log("[remove] mean " + rep["mean"].dump());
        } else if (report->parsed()) {
            h::report(dir, log);
        }
    } catch (const dbs::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const h::TrainingFailure& e) {
        std::cerr << "training failure: " << e.what() << "\n";
        return 3;
    } catch (const h::ScanFailure& e) {
        std::cerr << "scan failure: " << e.what() << "\n";
        return 4;
    } catch (const dbs::Error& e) {
        std::cerr << "failure: " << e.what() << "\n";
        return remove->parsed() || scan->parsed() || calibrate->parsed() ? 4 : 3;
    }
    return 0;
}
