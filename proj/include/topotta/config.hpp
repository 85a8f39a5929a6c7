#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "topotta/adapt.hpp"
#include "topotta/segnet.hpp"

namespace topotta {

// ---------------------------------------------------------------------------
// Flat `key = value` run configuration shared by every command. '#' starts a
// comment, blank lines are skipped, and unknown keys are hard errors so a
// typo in a hyperparameter name cannot silently fall back to a default.
// Command-line --set overrides reuse the same key table.
// ---------------------------------------------------------------------------

struct RunConfig {
    // model architecture (must match the checkpoint when one is loaded)
    int levels = 3;
    int base_channels = 8;
    int in_channels = 1;
    std::uint64_t model_seed = 1;   // weight initialization stream
    bool model_meta_explicit = false;  // set when levels/base/in came from config

    TrainConfig train;
    AdaptConfig adapt;  // owns the hard-sample generation settings

    std::uint64_t seed = 0;  // run seed: data generation, adaptation stream
    std::string data_dir;
    std::string checkpoint;
    std::string out_dir;
};

// Applies one `key = value` pair. Throws std::invalid_argument naming the key
// on unknown keys and unparseable or out-of-range values.
void apply_config(RunConfig& cfg, const std::string& key, const std::string& value);

// Parses a whole config text (see above for the line grammar).
RunConfig parse_config_text(const std::string& text);

// Reads and parses a config file. Throws std::invalid_argument (with the
// path) when the file cannot be read.
RunConfig load_config_file(const std::string& path);

// Re-checks every field against the invariants of its owning type; called by
// the commands after all overrides are applied and before any work starts.
void validate_config(const RunConfig& cfg);

// All recognized keys with their current values, one `key = value` per line,
// in table order. Doubles as documentation and as a round-trippable dump.
std::string dump_config(const RunConfig& cfg);

}  // namespace topotta
