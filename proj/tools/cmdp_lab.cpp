#include <CLI11.hpp>
#include <json.hpp>

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "cmdp_lab/harness.hpp"
#include "cmdp_lab/invariants.hpp"
#include "cmdp_lab/json_io.hpp"

namespace {

struct Options {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::string format;
    std::string param;
    std::vector<double> values;
};

cmdp::ExperimentConfig load_config(const Options& o) {
    if (o.config.empty()) throw cmdp::ConfigError("--config is required");
    auto cfg = cmdp::ExperimentConfig::load(o.config);
    if (o.seed) {
        cfg.master_seed = *o.seed;
        cfg.source["master_seed"] = *o.seed;
    }
    if (!o.out.empty()) {
        cfg.output = o.out;
        cfg.source["output"] = o.out;
    }
    if (!o.format.empty()) {
        cfg.format = o.format;
        cfg.source["format"] = o.format;
    }
    cfg.validate();
    return cfg;
}

std::filesystem::path out_dir(const Options& o) {
    if (const char* env = std::getenv("CMDP_LAB_OUT"); env && *env) return env;
    return o.out.empty() ? "out" : o.out;
}

int cmd_generate(const Options& o) {
    if (o.config.empty()) throw cmdp::ConfigError("--config is required");
    std::ifstream in(o.config);
    if (!in) throw cmdp::ConfigError("cannot open config " + o.config);
    nlohmann::json doc;
    try {
        in >> doc;
    } catch (const nlohmann::json::exception& e) {
        throw cmdp::ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    // Accept either a full experiment config or a bare generator spec.
    const nlohmann::json& env_doc = doc.contains("env") ? doc.at("env") : doc;
    auto spec = cmdp::GenSpec::from_json(env_doc);
    try {
        spec.validate();
    } catch (const cmdp::InvalidParameter& e) {
        throw cmdp::ConfigError(std::string("env: ") + e.what());
    }
    if (o.seed) spec.seed = *o.seed;
    const auto env = cmdp::generate(spec);
    const auto dir = out_dir(o);
    std::filesystem::create_directories(dir);
    const auto path = dir / ("env-" + std::to_string(spec.seed) + ".json");
    nlohmann::json j = cmdp::cmdp_to_json(env->cmdp());
    j["generator"] = spec.to_json();
    std::ofstream(path) << j.dump(2) << '\n';
    std::cout << path.string() << '\n';
    return 0;
}

int cmd_run(const Options& o) {
    const auto cfg = load_config(o);
    const auto report = cmdp::run(cfg);
    const auto path = cmdp::write_report(report);
    for (const auto& s : report.seeds)
        if (s.error) std::cerr << "seed " << s.index << ": " << *s.error << '\n';
    std::cout << path.string() << ": " << (report.passed() ? "PASS" : "FAIL") << " success "
              << report.success().successes << "/" << report.seeds.size() << ", mean episodes "
              << report.mean_episodes() << ", mean suboptimality " << report.mean_suboptimality() << '\n';
    return report.passed() ? 0 : 1;
}

int cmd_sweep(const Options& o) {
    auto cfg = load_config(o);
    const std::string param = o.param.empty() ? cfg.sweep_param : o.param;
    const std::vector<double> values = o.values.empty() ? cfg.sweep_values : o.values;
    const auto points = cmdp::sweep(cfg, param, values);
    const auto dir = cmdp::output_dir(cfg);
    std::filesystem::create_directories(dir);
    const auto path = dir / (cfg.name + "-sweep.csv");
    std::ofstream(path) << cmdp::sweep_csv(points);
    bool passed = true;
    for (const auto& p : points) passed = passed && p.report.passed();
    std::cout << path.string() << '\n' << cmdp::sweep_csv(points);
    return passed ? 0 : 1;
}

int cmd_verify(const Options& o) {
    const std::uint64_t seed = o.seed.value_or(20240601);
    std::vector<cmdp::CheckResult> results{
        cmdp::check_planner_equivalence(200, 1e-9, cmdp::derive_seed(seed, 1)),
        cmdp::check_occupancy_distance(50, {0.01, 0.1}, 1e-9, cmdp::derive_seed(seed, 2)),
        cmdp::check_tabular_guarantee(100, 0.1, 0.05, 4, 0.95, 0.90, cmdp::derive_seed(seed, 3)),
        cmdp::check_importance_sampling(5000, 0.01, cmdp::derive_seed(seed, 4)),
        cmdp::check_acdd_stochasticity(10000, 1e-9, cmdp::derive_seed(seed, 5)),
    };
    bool passed = true;
    nlohmann::json j{{"schema", cmdp::kReportSchema}, {"seed", seed}, {"checks", nlohmann::json::array()}};
    for (const auto& r : results) {
        passed = passed && r.passed;
        std::cout << (r.passed ? "PASS " : "FAIL ") << r.name << ": " << r.detail << '\n';
        j["checks"].push_back({{"name", r.name}, {"passed", r.passed}, {"detail", r.detail}});
    }
    if (!o.out.empty() || std::getenv("CMDP_LAB_OUT")) {
        const auto dir = out_dir(o);
        std::filesystem::create_directories(dir);
        if (o.format == "csv") {
            std::ofstream out(dir / "verify.csv");
            out << "check,passed\n";
            for (const auto& r : results) out << r.name << ',' << (r.passed ? 1 : 0) << '\n';
        } else {
            std::ofstream(dir / "verify.json") << j.dump(2) << '\n';
        }
    }
    return passed ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"cmdp-lab: contextual MDP learning experiments"};
    app.require_subcommand(1);
    Options o;
    auto common = [&](CLI::App* sub, bool needs_config) {
        auto* c = sub->add_option("--config", o.config, "experiment config (JSON)");
        if (needs_config) c->required();
        sub->add_option("--seed", o.seed, "master seed override");
        sub->add_option("--out", o.out, "output directory");
        sub->add_option("--format", o.format, "report format")->check(CLI::IsMember({"json", "csv"}));
    };
    auto* gen = app.add_subcommand("generate", "generate an environment and export it");
    common(gen, true);
    auto* run = app.add_subcommand("run", "run an experiment config");
    common(run, true);
    auto* sw = app.add_subcommand("sweep", "run a config over a parameter grid");
    common(sw, true);
    sw->add_option("--param", o.param, "dotted parameter path, e.g. learner.eps");
    sw->add_option("--values", o.values, "grid values");
    auto* ver = app.add_subcommand("verify", "run the invariant suites");
    common(ver, false);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (*gen) return cmd_generate(o);
        if (*run) return cmd_run(o);
        if (*sw) return cmd_sweep(o);
        return cmd_verify(o);
    } catch (const cmdp::ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
}
