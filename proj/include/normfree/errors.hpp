#pragma once

#include <stdexcept>

namespace normfree {

/// Raised when operand shapes are incompatible.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Raised when an API contract (e.g. scalar root for backward) is violated.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

/// Raised for invalid architecture, data or training configuration.
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Invalid command-line or recipe combination, detected before any compute.
class UsageError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// Runs that cannot be compared (different corpus, tokenizer or context).
class ComparabilityError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace normfree
