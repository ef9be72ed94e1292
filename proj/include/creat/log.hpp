#pragma once

#include <string>

namespace creat::log {

// Warnings go to stderr unless silenced (the CLI's --quiet, tests).
void set_quiet(bool quiet);
bool quiet();
void warn(const std::string& message);
void info(const std::string& message);

}  // namespace creat::log
