#pragma once

#include "unifusion/model_config.hpp"
#include "unifusion/objectives.hpp"
#include "unifusion/synthdata.hpp"
#include "unifusion/trainkit.hpp"

#include <string>

#include "json.hpp"

namespace unifusion::cli {

// One config file drives every subcommand. Unknown keys are hard errors and
// the resolved config is echoed into the run directory.
struct RunConfig {
    ModelConfig model;
    train::PhaseConfig phase1a;
    train::PhaseConfig phase1b;
    train::PhaseConfig phase2;
    loss::Weights weights;
    synth::DatasetConfig data;
    std::string data_dir = "data";
    std::string run_dir = "runs/default";
    std::uint64_t seed = 1;
};

RunConfig default_config();
RunConfig parse_config(const nlohmann::ordered_json& j);
RunConfig load_config(const std::string& path);
nlohmann::ordered_json to_json(const RunConfig& c);

// UNIFUSION_RUN_DIR, when set, is the root for relative run directories.
std::string resolved_run_dir(const RunConfig& c);

void validate(const RunConfig& c);

} // namespace unifusion::cli
