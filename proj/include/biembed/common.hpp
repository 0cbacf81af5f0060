#pragma once

#include <stdexcept>
#include <string>

namespace biembed {

// Error taxonomy shared across the library. The CLI maps these onto
// process exit codes (config -> 2, numeric -> 3, io -> 4).
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape or dimension mismatch between tensors.
struct ShapeError : Error {
    using Error::Error;
};

// Invalid configuration value or malformed config document.
struct ConfigError : Error {
    using Error::Error;
};

// File system / serialization failures.
struct IoError : Error {
    using Error::Error;
};

// Numerical failure (NaN/Inf loss, diverging run).
struct NumericError : Error {
    using Error::Error;
};

// Mathematically degenerate input (zero-norm vector, zero-variance batch).
struct DegenerateError : Error {
    using Error::Error;
};

}  // namespace biembed
