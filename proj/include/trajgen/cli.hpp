#pragma once

// Command-line front end: synth, train, generate and evaluate.
//
// Exit codes: 0 success, 1 runtime failure, 2 usage error.

#include <iosfwd>

namespace trajgen::cli {

inline constexpr int kExitOk = 0;
inline constexpr int kExitFailure = 1;
inline constexpr int kExitUsage = 2;

int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace trajgen::cli
