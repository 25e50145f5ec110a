#pragma once

#include <iosfwd>

#include "eqprune/error.hpp"

namespace eqprune::cli {

enum ExitCode : int {
  kOk = 0,
  kOther = 1,
  kConfig = 2,
  kData = 3,
  kNumeric = 4,
  kValidation = 5,
};

int exit_code(ErrorCategory category);

/// Parses argv and runs one subcommand. Results go to `out`, diagnostics to
/// `err`; never throws.
int run(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace eqprune::cli
