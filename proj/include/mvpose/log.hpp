#pragma once

#include <functional>
#include <iostream>
#include <mutex>
#include <string>
#include <utility>

namespace mvpose {

enum class LogLevel { kDebug = 0, kInfo = 1, kWarning = 2, kError = 3, kOff = 4 };

namespace detail {
struct LogConfig {
  std::mutex mutex;
  LogLevel level = LogLevel::kWarning;
  std::function<void(LogLevel, const std::string&)> sink;
};
inline LogConfig& log_config() {
  static LogConfig config;
  return config;
}
}  // namespace detail

inline void set_log_level(LogLevel level) {
  std::lock_guard lock(detail::log_config().mutex);
  detail::log_config().level = level;
}

/// Replaces the default stderr sink; pass an empty function to restore it.
inline void set_log_sink(std::function<void(LogLevel, const std::string&)> sink) {
  std::lock_guard lock(detail::log_config().mutex);
  detail::log_config().sink = std::move(sink);
}

inline void log_message(LogLevel level, const std::string& msg) {
  auto& cfg = detail::log_config();
  std::lock_guard lock(cfg.mutex);
  if (level < cfg.level) return;
  if (cfg.sink) {
    cfg.sink(level, msg);
    return;
  }
  static constexpr const char* kNames[] = {"debug", "info", "warning", "error", "off"};
  std::cerr << "[mvpose " << kNames[static_cast<int>(level)] << "] " << msg << '\n';
}

inline void log_info(const std::string& msg) { log_message(LogLevel::kInfo, msg); }
inline void log_warning(const std::string& msg) { log_message(LogLevel::kWarning, msg); }

}  // namespace mvpose
