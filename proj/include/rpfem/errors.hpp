#ifndef RPFEM_ERRORS_HPP_
#define RPFEM_ERRORS_HPP_

#include <stdexcept>
#include <string>

namespace rpfem {

/// Root of every exception thrown by the library.
class Error : public std::runtime_error {
public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that cannot be combined by an operation.
class DimensionError : public Error {
public:
  using Error::Error;
};

/// A caller broke an operation precondition (non-scalar loss, C = 0, ...).
class ContractError : public Error {
public:
  using Error::Error;
};

/// Malformed input file or record.
class FormatError : public Error {
public:
  using Error::Error;
};

/// Inconsistent user configuration (label maps, widths, CLI flags).
class ConfigError : public Error {
public:
  using Error::Error;
};

class ChecksumError : public FormatError {
public:
  using FormatError::FormatError;
};

class VersionError : public FormatError {
public:
  using FormatError::FormatError;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
public:
  using Error::Error;
};

}  // namespace rpfem

#endif  // RPFEM_ERRORS_HPP_
