#pragma once

#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <string>

namespace oft {

enum class LogLevel : int { error = 0, warn = 1, info = 2, debug = 3 };

// Parsed once from OFT_LOG_LEVEL (error|warn|info|debug or 0..3); default info.
inline LogLevel log_level() {
    static const LogLevel level = [] {
        const char* env = std::getenv("OFT_LOG_LEVEL");
        if (!env) return LogLevel::info;
        if (!std::strcmp(env, "error") || !std::strcmp(env, "0")) return LogLevel::error;
        if (!std::strcmp(env, "warn") || !std::strcmp(env, "1")) return LogLevel::warn;
        if (!std::strcmp(env, "info") || !std::strcmp(env, "2")) return LogLevel::info;
        if (!std::strcmp(env, "debug") || !std::strcmp(env, "3")) return LogLevel::debug;
        return LogLevel::info;
    }();
    return level;
}

inline void log_at(LogLevel level, const char* tag, const std::string& msg) {
    if (static_cast<int>(level) <= static_cast<int>(log_level()))
        std::fprintf(stderr, "[%s] %s\n", tag, msg.c_str());
}

inline void log_error(const std::string& msg) { log_at(LogLevel::error, "error", msg); }
inline void log_warn(const std::string& msg) { log_at(LogLevel::warn, "warn", msg); }
inline void log_info(const std::string& msg) { log_at(LogLevel::info, "info", msg); }
inline void log_debug(const std::string& msg) { log_at(LogLevel::debug, "debug", msg); }

}  // namespace oft
