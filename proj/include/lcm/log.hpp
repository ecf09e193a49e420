#pragma once

#include <cstdio>
#include <string>

namespace lcm {

enum class LogLevel { kError = 0, kWarn = 1, kInfo = 2, kDebug = 3 };

LogLevel log_level();
void set_log_level(LogLevel level);

// Parses "error" | "warn" | "info" | "debug"; throws ConfigError otherwise.
LogLevel parse_log_level(const std::string& name);

void log_message(LogLevel level, const std::string& message);

inline void log_error(const std::string& m) { log_message(LogLevel::kError, m); }
inline void log_warn(const std::string& m) { log_message(LogLevel::kWarn, m); }
inline void log_info(const std::string& m) { log_message(LogLevel::kInfo, m); }
inline void log_debug(const std::string& m) { log_message(LogLevel::kDebug, m); }

}  // namespace lcm
