#pragma once

#include <ostream>
#include <string>
#include <vector>

namespace funcreg {

enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitUsage = 2,
  kExitData = 3,
  kExitNumeric = 4,
};

/// Entry point of the `funcreg` tool. Progress and errors go to `err`;
/// `out` only receives help text and the report table when written to "-".
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace funcreg
