/// @file errors.hpp
/// @brief Exception taxonomy. The CLI maps these onto process exit codes:
///        validation/parse/usage -> 1, numerical failure -> 2.
#pragma once

#include <stdexcept>
#include <string>

namespace cnwf {

// Malformed inputs: bad mesh files, inconsistent shapes, out-of-range config.
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Text-format errors that can name the offending line.
struct ParseError : ValidationError {
  ParseError(const std::string& msg, const std::string& file, int line)
      : ValidationError(file + ":" + std::to_string(line) + ": " + msg),
        line_number(line) {}
  int line_number;
};

// Resource-budget violations (e.g. a mesh request exceeding the element cap).
struct CapacityError : ValidationError {
  using ValidationError::ValidationError;
};

// Solver breakdowns: singular systems, non-convergence where convergence is a
// contract, NaN contamination.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace cnwf
