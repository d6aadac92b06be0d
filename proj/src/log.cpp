// Copyright (C) 2026 The RASS-desk Authors
// SPDX-License-Identifier: Apache-2.0

#include "rass/log.hpp"

#include <spdlog/sinks/basic_file_sink.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <mutex>

namespace rass::log {

namespace {

std::mutex g_mutex;

std::shared_ptr<spdlog::logger>& logger() {
  static std::shared_ptr<spdlog::logger> instance = [] {
    auto console = std::make_shared<spdlog::sinks::stderr_color_sink_mt>();
    auto l = std::make_shared<spdlog::logger>("rass", console);
    l->set_pattern("[%Y-%m-%d %H:%M:%S.%e] [%l] %v");
    l->set_level(spdlog::level::info);
    return l;
  }();
  return instance;
}

std::shared_ptr<spdlog::sinks::basic_file_sink_mt> g_file;

}  // namespace

void debug(const std::string& msg) { logger()->debug(msg); }
void info(const std::string& msg) { logger()->info(msg); }
void warn(const std::string& msg) { logger()->warn(msg); }
void error(const std::string& msg) { logger()->error(msg); }

void set_level(Level level) {
  static constexpr spdlog::level::level_enum map[] = {spdlog::level::debug, spdlog::level::info,
                                                      spdlog::level::warn, spdlog::level::err,
                                                      spdlog::level::off};
  logger()->set_level(map[static_cast<int>(level)]);
}

void set_file(const std::filesystem::path& path) {
  std::lock_guard<std::mutex> lock(g_mutex);
  auto& sinks = logger()->sinks();
  if (g_file) {
    g_file->flush();
    sinks.erase(std::remove(sinks.begin(), sinks.end(), g_file), sinks.end());
    g_file.reset();
  }
  if (path.empty()) return;
  g_file = std::make_shared<spdlog::sinks::basic_file_sink_mt>(path.string(), /*truncate=*/true);
  g_file->set_pattern("[%Y-%m-%d %H:%M:%S.%e] [%l] %v");
  sinks.push_back(g_file);
  logger()->flush_on(spdlog::level::info);
}

}  // namespace rass::log
