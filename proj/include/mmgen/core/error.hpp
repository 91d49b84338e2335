#pragma once

#include <stdexcept>
#include <string>

namespace mmgen {

// Base for everything thrown by the library. The CLI maps these to exit code 2.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : Error {
    using Error::Error;
};

// Scene object placement could not satisfy the overlap constraint.
struct PlacementError : Error {
    using Error::Error;
};

struct ParseError : Error {
    using Error::Error;
};

struct IoError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

// Non-finite loss / activations during training or sampling.
struct DivergenceError : Error {
    using Error::Error;
};

}  // namespace mmgen
