#pragma once

#include <stdexcept>
#include <string>

namespace st {

/// Base for every error raised by the library. The CLI maps subclasses to
/// process exit codes (config 2, numeric 3, I/O 4).
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

class NumericError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

/// Raised when something tries to write into a frozen (teacher) tensor.
class FrozenTensorError : public Error {
public:
    using Error::Error;
};

}  // namespace st
