#pragma once

#include <atomic>
#include <iostream>
#include <mutex>
#include <string>

namespace hvgg::log {

inline std::atomic<bool>& quiet() {
  static std::atomic<bool> flag{false};
  return flag;
}

inline void write(const char* level, const std::string& message) {
  if (quiet()) return;
  static std::mutex mu;
  std::lock_guard lock(mu);
  std::cerr << level << ": " << message << '\n';
}

inline void warn(const std::string& message) { write("warning", message); }
inline void info(const std::string& message) { write("info", message); }

}  // namespace hvgg::log
