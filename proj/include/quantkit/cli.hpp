#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace quantkit {

enum ExitCode : int { kExitOk = 0, kExitUsage = 2, kExitValidation = 3, kExitNumeric = 4, kExitIo = 5 };

/// Entry point of the `quantkit` tool. argv[0] is the program name.
int run_cli(const std::vector<std::string>& argv, std::ostream& out, std::ostream& err);

}  // namespace quantkit
