#ifndef TCBF_ERRORS_HPP
#define TCBF_ERRORS_HPP

#include <stdexcept>
#include <string>

namespace tcbf {

/// Base of every exception thrown by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Bad dimensions, missing keys, parameters outside their declared domain.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Non-finite values produced by a user-supplied map.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// Non-finite state after an integration step.
class BlowUpError : public NumericError {
 public:
  using NumericError::NumericError;
};

/// c <= 0 while d vanishes: no input can satisfy the strict CBF condition.
class InfeasibleError : public Error {
 public:
  using Error::Error;
};

/// Tunable term outside its admissible range at the evaluated point.
class RangeError : public Error {
 public:
  using Error::Error;
};

/// (c, |d|^2) outside the open set where c > 0 or |d|^2 > 0.
class DomainError : public Error {
 public:
  using Error::Error;
};

/// CBF condition and the input norm bound cannot hold together.
class IncompatibleError : public Error {
 public:
  IncompatibleError(const std::string& what, double deficit)
      : Error(what), deficit_(deficit) {}

  double deficit() const noexcept { return deficit_; }

 private:
  double deficit_;
};

/// c - kappa * Gamma too close to zero for the margin ratio.
class DegenerateMarginError : public Error {
 public:
  using Error::Error;
};

}  // namespace tcbf

#endif  // TCBF_ERRORS_HPP
