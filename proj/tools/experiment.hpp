#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"

// Experiment specs: one JSON document per run, validated against the schema
// in schemas/bglab.schema.json, executed into an artifact directory with a
// provenance record that can itself be rerun.

namespace bglab::cli {

inline constexpr int kSchemaVersion = 1;
inline constexpr const char* kToolVersion = "0.1.0";
inline constexpr const char* kOutputRootEnv = "BGLAB_OUTPUT_ROOT";

struct Finding {
    std::string field;
    std::string message;
};

struct ValidationReport {
    std::vector<Finding> errors, warnings;
    bool ok() const { return errors.empty(); }
    nlohmann::ordered_json to_json() const;
};

// Schema and physical-range checks; never throws.
ValidationReport validate_config(const nlohmann::json& spec);
ValidationReport validate_config_file(const std::string& path);

struct RunOverrides {
    std::optional<std::uint64_t> seed;
    std::optional<std::string> output;
    std::optional<std::string> kind;  // subcommand; must agree with the spec when both are given
    int threads = 1;
};

struct RunResult {
    int exit_code = 0;  // 0 ok, 1 runtime failure, 2 schema violation
    std::string output_dir;
    std::vector<std::string> artifacts;  // file names written (timing.json excluded)
    nlohmann::ordered_json error;        // null on success
};

// A provenance.json written by a previous run is accepted in place of a spec.
RunResult run_experiment(const std::string& path, const RunOverrides& overrides);
RunResult run_experiment(const nlohmann::json& spec, const RunOverrides& overrides);

}  // namespace bglab::cli
