#include <cstdio>
#include <exception>
#include <string>
#include <vector>

// Subcommands live in the library so tests can drive them in-process.
#include "mmgen/cli/cli.hpp"

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    return mmgen::cli::dispatch(args);
}
