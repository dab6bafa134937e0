#pragma once

#include <stdexcept>
#include <string>

namespace dcr {

class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Operand shapes do not conform.
class DimensionError : public Error {
public:
    using Error::Error;
};

class IndexError : public Error {
public:
    using Error::Error;
};

class ArgumentError : public Error {
public:
    using Error::Error;
};

class ConfigError : public Error {
public:
    using Error::Error;
};

/// Malformed or incompatible checkpoint / CSV / PGM content.
class FormatError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
};

/// A caller-side precondition (tape state, snapped table, ...) was violated.
class PreconditionError : public Error {
public:
    using Error::Error;
};

/// Non-finite values appeared during training.
class NumericalError : public Error {
public:
    using Error::Error;
};

} // namespace dcr
