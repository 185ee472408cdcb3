#include <iostream>

#include "CLI11.hpp"
#include "experiment.hpp"

namespace {

int report(const bglab::cli::RunResult& r) {
    if (r.exit_code != 0) std::cout << r.error.dump() << '\n';
    return r.exit_code;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"bglab: hard-sphere fluctuation experiments"};
    app.require_subcommand(1);

    std::string config;
    std::optional<std::uint64_t> seed;
    std::optional<std::string> output;
    int threads = 1;
    auto common = [&](CLI::App* sub, bool needs_config) {
        auto* opt = sub->add_option("-c,--config", config, "experiment spec (JSON) or provenance.json");
        if (needs_config) opt->required();
        sub->add_option("--seed", seed, "override the spec seed");
        sub->add_option("--threads", threads, "worker threads (results do not depend on it)")->check(CLI::PositiveNumber);
        sub->add_option("-o,--output", output, std::string("artifact directory (default $") +
                                                   bglab::cli::kOutputRootEnv + "/<name>)");
    };

    auto* run = app.add_subcommand("run", "run a spec of any kind");
    common(run, true);
    std::vector<CLI::App*> kinds;
    for (const char* k : {"simulate", "estimate", "kinetic", "covariance", "duhamel"}) {
        kinds.push_back(app.add_subcommand(k, std::string("run a ") + k + " spec"));
        common(kinds.back(), true);
    }
    auto* comb = app.add_subcommand("combinatorics", "combinatorics tools");
    auto* selftest = comb->add_subcommand("selftest", "exact combinatorics self-test table");
    comb->require_subcommand(1);
    common(selftest, false);
    int max_n = 6;
    selftest->add_option("--max-n", max_n, "largest n")->check(CLI::Range(2, 7));

    auto* validate = app.add_subcommand("validate", "check a spec without running it");
    validate->add_option("-c,--config", config, "experiment spec (JSON)")->required();

    CLI11_PARSE(app, argc, argv);

    bglab::cli::RunOverrides ov;
    ov.seed = seed;
    ov.output = output;
    ov.threads = threads;

    if (validate->parsed()) {
        const auto r = bglab::cli::validate_config_file(config);
        std::cout << r.to_json().dump(2) << '\n';
        return r.ok() ? 0 : 2;
    }
    if (selftest->parsed()) {
        ov.kind = "selftest";
        if (!config.empty()) return report(bglab::cli::run_experiment(config, ov));
        nlohmann::json spec{{"schema_version", bglab::cli::kSchemaVersion},
                            {"kind", "selftest"},
                            {"seed", 0},
                            {"selftest", {{"max_n", max_n}}}};
        return report(bglab::cli::run_experiment(spec, ov));
    }
    if (run->parsed()) return report(bglab::cli::run_experiment(config, ov));
    for (auto* k : kinds)
        if (k->parsed()) {
            ov.kind = k->get_name();
            return report(bglab::cli::run_experiment(config, ov));
        }
    return 2;
}
