#pragma once

#include <stdexcept>
#include <string>

namespace cct {

// Shape disagreement between operands.
struct DimError : std::invalid_argument {
  explicit DimError(const std::string& msg) : std::invalid_argument(msg) {}
};

// A caller broke an API precondition.
struct ContractError : std::logic_error {
  explicit ContractError(const std::string& msg) : std::logic_error(msg) {}
};

// Out-of-range id (token, symbol, ...).
struct IndexError : std::out_of_range {
  explicit IndexError(const std::string& msg) : std::out_of_range(msg) {}
};

// Malformed or mismatching serialized data.
struct FormatError : std::runtime_error {
  explicit FormatError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace cct
