// Copyright (C) 2026 The RASS-desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace rass::cli {

/// Exit codes shared by every subcommand.
enum ExitCode : int {
  kOk = 0,
  kFailure = 1,       // I/O, training divergence, anything else
  kUsage = 2,         // unknown subcommand or malformed flags
  kBadConfig = 3,     // configuration validation, message names the field
};

/// Names of the subcommands, in usage order.
const std::vector<std::string>& subcommands();

std::string usage();

/// Every section at its defaults: {data, degrade, backbone, lora, loss,
/// train {ae, scr, ras}, eval}.
nlohmann::json default_config();

/// Overlays `user` onto the defaults and round-trips every section through
/// its typed config, so the result lists every field. Throws ConfigError on
/// invalid or mistyped entries.
nlohmann::json resolve_config(const nlohmann::json& user);

/// Runs one command line (without the program name) and returns its exit
/// code. Diagnostics go to stderr.
int dispatch(const std::vector<std::string>& args);
int dispatch(int argc, const char* const* argv);

}  // namespace rass::cli
