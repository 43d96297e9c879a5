#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace hlm {

// Error taxonomy mapped onto the CLI exit codes: usage errors (1) are
// handled by the argument parser, DataError -> 2, NumericalError -> 3.
struct ParseError : std::runtime_error {
  explicit ParseError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
  explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : std::runtime_error {
  explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericalError : std::runtime_error {
  explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace hlm
