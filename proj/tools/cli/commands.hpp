#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace mos::cli {

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitConfig = 2,
  kExitIo = 3,
  kExitTraining = 4,
  kExitCompatibility = 5,
  kExitMetricUndefined = 6,
};

// Runs one `mos` invocation; args exclude the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mos::cli
