#pragma once

#include <iosfwd>

namespace fruitreid {

/// Exit codes of the command-line tool.
enum ExitCode : int {
  kExitOk = 0,
  kExitConfig = 2,
  kExitDivergence = 3,
  kExitShape = 4,
  kExitIo = 5,
};

/// Runs one `fruitreid` subcommand. Human-readable lines go to `out`,
/// diagnostics to `err`; the return value is the process exit code.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace fruitreid
