#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace hvgg {

// Parses and runs one command; returns the process exit code
// (0 success, 1 usage, 2 data error, 3 numeric failure).
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace hvgg
