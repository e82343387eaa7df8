#pragma once

#include "mmbc/policies.hpp"

#include <map>
#include <string>

namespace mmbc {

class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// Flat "key = value" file with optional [section] headers; section names
// prefix the key as "section.key". '#' starts a comment.
std::map<std::string, std::string> parse_config_text(const std::string& text);
std::map<std::string, std::string> parse_config_file(const std::string& path);

struct ExperimentConfig {
    TaskId task = TaskId::Circle;
    Family family = Family::KlCvae;
    uint64_t seed = 0;
    int n_demos = 1000;
    int epochs = -1; // -1 -> task default
    Hyper hyper;
    DemoConfig demo;
    std::string out_dir = "out";

    // diagnostics
    int info_n_mc = 8;
    int valid_mass_samples = 2000;
    bool diag_info = true;
    bool diag_valid_mass = true;
};

// Applies keys onto the defaults; unknown keys are rejected with the key name.
ExperimentConfig config_from_map(const std::map<std::string, std::string>& kv);

// Canonical serialization (sorted keys, full precision); hashing this string
// identifies the run configuration.
std::string canonical_config_string(const ExperimentConfig& cfg);

} // namespace mmbc
