#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace longdiff::cli {

/// Exit codes of the command-line tool.
enum ExitCode : int {
  kOk = 0,
  kUnexpected = 1,
  kConfigError = 2,
  kIoError = 3,
  kNumericalError = 4,
};

/// Runs one invocation; `args` excludes the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace longdiff::cli
