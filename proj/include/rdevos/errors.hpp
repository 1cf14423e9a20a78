#pragma once

#include <stdexcept>
#include <string>

namespace rdevos {

/// Operand shapes are incompatible with the requested operation.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// A value lies outside the mathematical domain of an operation.
struct DomainError : std::domain_error {
  using std::domain_error::domain_error;
};

/// A caller broke an operation's precondition (wrong pattern, empty bank, ...).
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

/// Invalid or unknown configuration value.
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace rdevos
