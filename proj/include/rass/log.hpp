// Copyright (C) 2026 The RASS-desk Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <filesystem>
#include <string>

// Thin logging facade. spdlog's external fmt clashes with the fmt copy that
// ships inside the torch headers, so spdlog is only included by log.cpp,
// which is built without torch on the include path.
namespace rass::log {

enum class Level { Debug, Info, Warn, Error, Off };

void debug(const std::string& msg);
void info(const std::string& msg);
void warn(const std::string& msg);
void error(const std::string& msg);

void set_level(Level level);
/// Mirrors all subsequent messages into `path` (truncated). Passing an empty
/// path closes the file sink.
void set_file(const std::filesystem::path& path);

}  // namespace rass::log
