#pragma once

#include <stdexcept>
#include <string>

namespace atp {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Shapes or lengths that do not line up.
class DimensionError : public Error {
public:
    using Error::Error;
};

/// Non-finite values, divergence.
class NumericError : public Error {
public:
    using Error::Error;
};

/// API misuse: stale caches, mismatched manifests, missing labels.
class UsageError : public Error {
public:
    using Error::Error;
};

/// Invalid or infeasible configuration.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Argument outside the mathematical domain of an operation.
class DomainError : public Error {
public:
    using Error::Error;
};

/// Batch too small for batch statistics.
class DegenerateBatchError : public Error {
public:
    using Error::Error;
};

}  // namespace atp
