#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace candle {

/// Base class of every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A value violates a documented invariant (bad label, duplicate class name, ...).
class ValidationError : public Error {
 public:
  ValidationError(std::string field, const std::string& what);
  const std::string& field() const noexcept { return field_; }

 private:
  std::string field_;
};

/// Malformed serialized bytes. `offset` is the byte position where parsing failed.
class FormatError : public Error {
 public:
  FormatError(std::size_t offset, const std::string& what);
  std::size_t offset() const noexcept { return offset_; }

 private:
  std::size_t offset_;
};

class IoError : public Error {
 public:
  using Error::Error;
};

/// A vector that must be normalized has (near) zero length.
class DegenerateError : public Error {
 public:
  DegenerateError(std::size_t row, const std::string& what);
  std::size_t row() const noexcept { return row_; }

 private:
  std::size_t row_;
};

/// Caller passed an argument outside the operation's domain.
class ParameterError : public Error {
 public:
  using Error::Error;
};

/// A class required to have samples has none.
class CoverageError : public Error {
 public:
  CoverageError(int class_id, const std::string& what);
  int class_id() const noexcept { return class_id_; }

 private:
  int class_id_;
};

/// Evaluation protocol cannot be applied to the given data.
class ProtocolError : public Error {
 public:
  using Error::Error;
};

/// Non-finite loss or gradient.
class NumericalError : public Error {
 public:
  using Error::Error;
};

}  // namespace candle
