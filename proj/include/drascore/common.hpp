#pragma once

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <iostream>
#include <mutex>
#include <sstream>
#include <stdexcept>
#include <string>

namespace drascore {

inline constexpr const char* kVersion = "drascore 0.1.0";

// All contract violations surface as drascore::Error with a message naming
// the offending quantity. The CLI turns these into machine-readable errors.
class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

template <typename... Args>
[[noreturn]] inline void fail(Args&&... parts) {
  std::ostringstream oss;
  (oss << ... << parts);
  throw Error(oss.str());
}

template <typename... Args>
inline void require(bool cond, Args&&... parts) {
  if (!cond) fail(std::forward<Args>(parts)...);
}

enum class LogLevel { kError = 0, kInfo = 1, kDebug = 2 };

inline LogLevel log_level() {
  static LogLevel level = [] {
    const char* env = std::getenv("DRASCORE_LOG");
    if (!env) return LogLevel::kError;
    std::string s(env);
    if (s == "debug") return LogLevel::kDebug;
    if (s == "info") return LogLevel::kInfo;
    return LogLevel::kError;
  }();
  return level;
}

template <typename... Args>
inline void log_at(LogLevel lvl, const char* tag, Args&&... parts) {
  if (static_cast<int>(lvl) > static_cast<int>(log_level())) return;
  static std::mutex mu;
  std::lock_guard<std::mutex> lock(mu);
  std::ostringstream oss;
  (oss << ... << parts);
  std::cerr << "[" << tag << "] " << oss.str() << "\n";
}

template <typename... Args>
inline void log_info(Args&&... parts) {
  log_at(LogLevel::kInfo, "info", std::forward<Args>(parts)...);
}

template <typename... Args>
inline void log_debug(Args&&... parts) {
  log_at(LogLevel::kDebug, "debug", std::forward<Args>(parts)...);
}

}  // namespace drascore
