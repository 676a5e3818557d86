#pragma once

#include <stdexcept>
#include <string>

namespace mmn {

// Error taxonomy used across the library. Everything derives from Error so
// callers can catch one base type; the CLI maps ConfigError/ParseError to
// usage exits and the rest to runtime failures.
struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ShapeError : Error {
  using Error::Error;
};

struct DomainError : Error {
  using Error::Error;
};

struct ParseError : Error {
  using Error::Error;
};

struct IntegrityError : Error {
  using Error::Error;
};

struct ConfigError : Error {
  using Error::Error;
};

struct IoError : Error {
  using Error::Error;
};

struct TrainError : Error {
  using Error::Error;
};

}  // namespace mmn
