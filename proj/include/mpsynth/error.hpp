#pragma once

#include <stdexcept>
#include <string>

namespace mpsynth {

/// Base of every error the library throws. `exit_code()` is the CLI contract.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    virtual int exit_code() const noexcept { return 1; }
};

/// A caller broke an operation's precondition (shapes, argument ranges).
class ContractError : public Error {
public:
    using Error::Error;
};

/// Invalid configuration value or combination.
class ConfigError : public Error {
public:
    using Error::Error;
};

/// Operation invoked in the wrong lifecycle state (e.g. backward twice).
class StateError : public Error {
public:
    using Error::Error;
};

class IoError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 2; }
};

/// Malformed on-disk data. The message names the offending field.
class FormatError : public Error {
public:
    FormatError(std::string field, const std::string& detail)
        : Error(field + ": " + detail), field_(std::move(field)) {}
    const std::string& field() const noexcept { return field_; }
    int exit_code() const noexcept override { return 2; }

private:
    std::string field_;
};

class CheckpointError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 2; }
};

/// A primitive produced NaN or Inf.
class NonFiniteError : public Error {
public:
    using Error::Error;
    int exit_code() const noexcept override { return 4; }
};

} // namespace mpsynth
