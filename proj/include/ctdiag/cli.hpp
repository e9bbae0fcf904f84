#pragma once

#include <ostream>

namespace ctdiag {

// Exit codes shared by every subcommand.
inline constexpr int kExitOk = 0;
inline constexpr int kExitUsage = 1;
inline constexpr int kExitModel = 2;
inline constexpr int kExitData = 3;

// Entry point of the `ctdiag` tool: inspect | predict | evaluate | sweep | train-head.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace ctdiag
