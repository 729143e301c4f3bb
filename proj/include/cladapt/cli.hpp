#pragma once

#include <iosfwd>

namespace cladapt::cli {

// Subcommands: generate, train, adapt, evaluate, report, run.
// Returns 0 on success, 2 on usage/configuration errors, 1 on runtime errors.
int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err);

}  // namespace cladapt::cli
