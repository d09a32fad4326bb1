#pragma once

#include <stdexcept>
#include <string>

namespace amc {

// Base error type. The CLI maps these onto exit codes, so keep the
// categories coarse.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ValueError : public Error {
 public:
  using Error::Error;
};

// Malformed or corrupted artifact file.
class FormatError : public Error {
 public:
  using Error::Error;
};

// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

// Invalid configuration; the CLI exits with code 3 for these.
class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace amc
