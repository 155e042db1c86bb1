#pragma once

#include <string>
#include <vector>

#include "afan/config.hpp"

namespace afan {

// Exit codes: 0 ok, 1 usage/config error, 2 data error, 3 numeric failure.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitData = 2;
inline constexpr int kExitNumeric = 3;

int cmd_train(const ExperimentConfig& cfg);
int cmd_eval(const ExperimentConfig& cfg);
int cmd_ablate(const ExperimentConfig& cfg);
int cmd_landscape(const ExperimentConfig& cfg);
int cmd_gen_data(const ExperimentConfig& cfg);
int cmd_dump_features(const ExperimentConfig& cfg);

// Full CLI: subcommand, --config <path> (repeatable), --set key=value
// (repeatable). Returns the process exit code.
int run_cli(const std::vector<std::string>& args);

}  // namespace afan
