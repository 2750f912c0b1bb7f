#pragma once

#include <string_view>

namespace pgdiffseg {

enum class LogLevel { debug = 0, info = 1, warn = 2, error = 3, silent = 4 };

// Messages below the threshold are dropped. Default: info.
void set_log_level(LogLevel level);
LogLevel log_level();

void log_message(LogLevel level, std::string_view msg);
inline void log_info(std::string_view msg) { log_message(LogLevel::info, msg); }
inline void log_warn(std::string_view msg) { log_message(LogLevel::warn, msg); }
inline void log_error(std::string_view msg) { log_message(LogLevel::error, msg); }

}  // namespace pgdiffseg
