#pragma once

#include <stdexcept>
#include <string>

namespace t2is {

// Base of every error the library throws. The CLI maps the categories below
// onto process exit codes (validation 2, external service 3, invariant 4).
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Bad user input: malformed files, out-of-range values, inconsistent sizes.
class ValidationError : public Error {
public:
    using Error::Error;
};

class DimensionError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

// A softmax row whose every entry is -inf.
class DegenerateAttentionError : public Error {
public:
    using Error::Error;
};

// Model / LLM output that cannot be parsed into the expected structure.
class ParseError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

class SizeError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

// Failure talking to an external chat or scorer endpoint.
class ExternalServiceError : public Error {
public:
    ExternalServiceError(const std::string& what, bool retryable, int status = 0)
        : Error(what), retryable_(retryable), status_(status) {}

    bool retryable() const { return retryable_; }
    int status() const { return status_; }

private:
    bool retryable_;
    int status_;
};

// The endpoint answered but lacks a feature we need (e.g. top-k logprobs).
class CapabilityError : public ExternalServiceError {
public:
    explicit CapabilityError(const std::string& what) : ExternalServiceError(what, false) {}
};

// Yes/No probability could not be derived from a response.
class ScoringError : public Error {
public:
    using Error::Error;
};

// Something that must never happen did (NaN loss, non-finite tensor, ...).
class InvariantError : public Error {
public:
    using Error::Error;
};

}  // namespace t2is
