#pragma once

#include <string>
#include <vector>

namespace m3dm::cli {

/// Runs the command line (without the program name) and returns the exit code.
/// Diagnostics go to stderr, progress to stdout.
int run(const std::vector<std::string>& args);

}  // namespace m3dm::cli
