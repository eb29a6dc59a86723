#include "d3il/log.hpp"

#include <atomic>
#include <chrono>
#include <cstdio>
#include <ctime>

namespace d3il {

namespace {
std::atomic<LogLevel> g_level{LogLevel::kInfo};
}

void set_log_level(LogLevel level) { g_level = level; }

void log(LogLevel level, const std::string& msg) {
    if (level < g_level.load()) return;
    static const char* tags[] = {"debug", "info", "warn", "error"};
    const auto now = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
    std::tm tm{};
    localtime_r(&now, &tm);
    char stamp[32];
    std::strftime(stamp, sizeof(stamp), "%H:%M:%S", &tm);
    std::fprintf(stderr, "[%s %s] %s\n", stamp, tags[static_cast<int>(level)], msg.c_str());
}

}  // namespace d3il
