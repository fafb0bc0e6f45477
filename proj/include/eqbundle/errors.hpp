#pragma once

#include <stdexcept>
#include <string>

#include <nlohmann/json.hpp>

namespace eqb {

/// Base of every error raised by the library.
///
/// `kind()` is a stable short tag used by the CLI when serializing failures,
/// `details()` carries an optional structured payload (an audit report, a rank
/// report, a location along a path...).
class Error : public std::runtime_error {
public:
  explicit Error(const std::string& what, nlohmann::json details = nullptr)
      : std::runtime_error(what), details_(std::move(details)) {}

  virtual const char* kind() const noexcept { return "error"; }
  const nlohmann::json& details() const noexcept { return details_; }

private:
  nlohmann::json details_;
};

/// Malformed input: bad dimensions, non-finite entries, unknown names.
class InputError : public Error {
public:
  using Error::Error;
  const char* kind() const noexcept override { return "input"; }
};

/// Requested operation exists but not for this dimension (e.g. fiber tracing with k != 1).
class UnsupportedDimensionError : public InputError {
public:
  using InputError::InputError;
  const char* kind() const noexcept override { return "unsupported_dimension"; }
};

/// An evaluator produced a non-finite value or hit a domain violation.
class EvaluationError : public Error {
public:
  using Error::Error;
  const char* kind() const noexcept override { return "evaluation"; }
};

/// A rank or non-degeneracy condition failed where the algorithm needs it.
class DegeneracyError : public Error {
public:
  using Error::Error;
  const char* kind() const noexcept override { return "degeneracy"; }
};

/// Kernel dimension changed along a traced fiber.
class BranchPointError : public DegeneracyError {
public:
  using DegeneracyError::DegeneracyError;
  const char* kind() const noexcept override { return "branch_point"; }
};

/// An iterative solver did not converge within its budget.
class ConvergenceError : public Error {
public:
  using Error::Error;
  const char* kind() const noexcept override { return "convergence"; }
};

/// An iterate left the admissible domain by more than the allowed slack.
class DomainError : public Error {
public:
  using Error::Error;
  const char* kind() const noexcept override { return "domain"; }
};

/// Adaptive refinement budget exhausted (eigenvalue tracking, step control).
class ResolutionError : public Error {
public:
  using Error::Error;
  const char* kind() const noexcept override { return "resolution"; }
};

/// A transported endpoint could not be matched to the enumerated fiber points.
class HolonomyError : public Error {
public:
  using Error::Error;
  const char* kind() const noexcept override { return "holonomy"; }
};

} // namespace eqb
