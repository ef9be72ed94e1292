#include "creat/log.hpp"

#include <atomic>
#include <iostream>
#include <mutex>

namespace creat::log {

namespace {
std::atomic<bool> g_quiet{false};
std::mutex g_mutex;
}  // namespace

void set_quiet(bool quiet) { g_quiet = quiet; }
bool quiet() { return g_quiet; }

void warn(const std::string& message) {
  if (g_quiet) return;
  std::lock_guard lock(g_mutex);
  std::cerr << "warning: " << message << '\n';
}

void info(const std::string& message) {
  if (g_quiet) return;
  std::lock_guard lock(g_mutex);
  std::cerr << message << '\n';
}

}  // namespace creat::log
