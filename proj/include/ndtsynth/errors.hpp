#pragma once

#include <stdexcept>
#include <string>

namespace ndtsynth {

// Error categories map one-to-one onto CLI exit codes.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class DataError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Malformed or truncated file contents.
class DecodeError : public DataError {
 public:
  using DataError::DataError;
};

class ChecksumError : public DecodeError {
 public:
  using DecodeError::DecodeError;
};

class DimensionError : public DataError {
 public:
  DimensionError(const std::string& what, std::size_t expected, std::size_t actual)
      : DataError(what + ": expected " + std::to_string(expected) + ", got " +
                  std::to_string(actual)),
        expected_(expected),
        actual_(actual) {}

  std::size_t expected() const { return expected_; }
  std::size_t actual() const { return actual_; }

 private:
  std::size_t expected_;
  std::size_t actual_;
};

}  // namespace ndtsynth
