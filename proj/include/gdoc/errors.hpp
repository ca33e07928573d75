#pragma once

#include <stdexcept>
#include <string>

namespace gdoc {

// Error taxonomy mirrors the CLI exit codes: usage -> 1, data -> 2, numeric -> 3.

struct UsageError : std::runtime_error {
    explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// Shape/contract violations inside the math core. Counts as a numeric failure
// at the CLI boundary.
struct ShapeError : NumericError {
    explicit ShapeError(const std::string& msg) : NumericError(msg) {}
};

}  // namespace gdoc
