#pragma once

// Command-line entry points: gen-data, train-vae, train-unet, infer, eval.
//
// Exit codes: 0 ok, 2 config/usage/I-O, 3 integrity, 4 data.

#include <exception>
#include <ostream>

namespace depthdiff {

enum ExitCode : int { kExitOk = 0, kExitFailure = 1, kExitUsage = 2, kExitIntegrity = 3, kExitData = 4 };

/// Maps a library exception to its exit code.
int exit_code_for(const std::exception& e);

/// Parses argv, runs one command, and returns the exit code. Never throws.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace depthdiff
