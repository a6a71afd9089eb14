#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace evax::cli {

// Runs one command line (without the program name). Errors are reported on
// `err` as a single `error category=<name>: <message>` line and mapped to the
// category's exit code.
int run(const std::vector<std::string> &args, std::ostream &out, std::ostream &err);

const char *tool_version();

}  // namespace evax::cli
