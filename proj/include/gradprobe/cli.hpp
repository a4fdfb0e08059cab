#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "gradprobe/error.hpp"

namespace gradprobe::cli {

enum ExitCode : int {
  kExitOk = 0,
  kExitValidation = 1,
  kExitIo = 2,
  kExitDegenerate = 3,
};

int exit_code_for(ErrorCode code);

/// Runs the `gradprobe` command line. `args[0]` is the program name.
int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace gradprobe::cli
