#pragma once

#include <string>

namespace d3il {

enum class LogLevel { kDebug, kInfo, kWarn, kError };

// Messages below the threshold are dropped. Default: info.
void set_log_level(LogLevel level);
void log(LogLevel level, const std::string& msg);

inline void log_info(const std::string& msg) { log(LogLevel::kInfo, msg); }
inline void log_warn(const std::string& msg) { log(LogLevel::kWarn, msg); }

}  // namespace d3il
