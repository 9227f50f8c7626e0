#pragma once

#include <stdexcept>
#include <string>

namespace attbalance {

// Shape or axis disagreement between operands.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// API misuse: a precondition the caller controls was violated.
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

// Non-finite values or otherwise numerically unusable state.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace attbalance
