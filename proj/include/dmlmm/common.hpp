#pragma once

#include <stdexcept>
#include <string>

namespace dmlmm {

// Thrown when a caller violates a documented precondition or invariant.
class ContractViolation : public std::invalid_argument {
 public:
  explicit ContractViolation(const std::string& what)
      : std::invalid_argument(what) {}
};

// Thrown when a computation fails numerically (singular factorization,
// non-finite objective, ...) despite valid inputs.
class NumericalError : public std::runtime_error {
 public:
  explicit NumericalError(const std::string& what)
      : std::runtime_error(what) {}
};

}  // namespace dmlmm
