#pragma once

#include <iosfwd>

namespace tokopt {

// Exit codes of the command-line tool.
enum ExitCode : int { kExitOk = 0, kExitUsage = 2, kExitBackend = 3, kExitRuntime = 4 };

// Entry point of the `tokopt` tool; usable in-process.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace tokopt
