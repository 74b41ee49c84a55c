#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace ictx {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Bad input data or configuration: malformed files, broken invariants,
/// unsatisfiable requests. Maps to CLI exit code 1.
class ValidationError : public Error {
public:
    using Error::Error;
};

/// Failures that happen while running against valid inputs. Maps to exit code 2.
class RuntimeError : public Error {
public:
    using Error::Error;
};

/// Connection-level failure talking to a model backend. Retryable.
class TransportError : public RuntimeError {
public:
    using RuntimeError::RuntimeError;
};

/// Backend answered with something that does not follow the wire contract.
class ProtocolError : public RuntimeError {
public:
    using RuntimeError::RuntimeError;
};

/// Backend answered with a well-formed error payload.
class ModelError : public RuntimeError {
public:
    ModelError(std::string code, const std::string& message)
        : RuntimeError("model error [" + code + "]: " + message), code_(std::move(code)) {}

    const std::string& code() const noexcept { return code_; }

private:
    std::string code_;
};

}  // namespace ictx
