#pragma once

#include <iosfwd>
#include <string>
#include <vector>

namespace dcdnet::cli {

enum ExitCode : int {
  kOk = 0,
  kConfigError = 1,
  kMissingArtifact = 2,
  kNumericalAbort = 3,
  kCheckFailed = 4,
};

// args[0] is the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace dcdnet::cli
