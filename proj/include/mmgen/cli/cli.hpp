#pragma once

#include <string>
#include <vector>

namespace mmgen::cli {

// Routes argv-style arguments to the subcommands. Returns the process exit
// code: 0 success, 1 usage error, 2 runtime error.
int dispatch(const std::vector<std::string>& args);

}  // namespace mmgen::cli

#include "mmgen/cli/cli_impl.hpp"
