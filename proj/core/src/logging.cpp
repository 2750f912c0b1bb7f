#include "pgdiffseg/logging.hpp"

#include <atomic>
#include <iostream>
#include <mutex>

namespace pgdiffseg {

namespace {

std::atomic<LogLevel> g_level{LogLevel::info};
std::mutex g_mutex;

const char* tag(LogLevel l) {
  switch (l) {
    case LogLevel::debug: return "debug";
    case LogLevel::info: return "info";
    case LogLevel::warn: return "warn";
    case LogLevel::error: return "error";
    case LogLevel::silent: break;
  }
  return "";
}

}  // namespace

void set_log_level(LogLevel level) { g_level = level; }
LogLevel log_level() { return g_level; }

void log_message(LogLevel level, std::string_view msg) {
  if (level < g_level.load() || level == LogLevel::silent) return;
  std::lock_guard lock(g_mutex);
  std::cerr << "[" << tag(level) << "] " << msg << '\n';
}

}  // namespace pgdiffseg
