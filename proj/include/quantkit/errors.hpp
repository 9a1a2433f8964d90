#pragma once

#include <stdexcept>
#include <string>

namespace quantkit {

/// Base of every error the library throws. The CLI maps the subclasses onto exit codes.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Contract or structural violation (bad shapes, unknown ids, invalid config).
class ValidationError : public Error {
 public:
  using Error::Error;
};

/// Malformed serialized data.
class FormatError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

/// Non-finite values, divergence, impossible normalizations.
class NumericError : public Error {
 public:
  using Error::Error;
};

/// A calibration site with no nonzero activation.
class DegenerateSiteError : public NumericError {
 public:
  DegenerateSiteError(const std::string& site, const std::string& what)
      : NumericError("degenerate calibration site '" + site + "': " + what), site_(site) {}
  const std::string& site() const noexcept { return site_; }

 private:
  std::string site_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace quantkit
