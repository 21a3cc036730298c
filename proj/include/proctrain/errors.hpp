#pragma once

#include <stdexcept>
#include <string>

namespace proctrain {

// Base for everything thrown by the library; callers that only want a
// process exit code can catch this one type.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : Error {
    using Error::Error;
};

// Batch-level preconditions: empty loss mask, fully masked softmax row.
struct BatchError : Error {
    using Error::Error;
};

struct IndexError : Error {
    using Error::Error;
};

struct ConfigError : Error {
    using Error::Error;
};

struct ContextOverflowError : Error {
    using Error::Error;
};

struct TransferError : Error {
    using Error::Error;
};

struct DegenerateScoreError : Error {
    using Error::Error;
};

// Checkpoint file errors, one type per failure mode.
struct FormatError : Error {
    using Error::Error;
};
struct CorruptHeaderError : FormatError {
    using FormatError::FormatError;
};
struct TruncatedPayloadError : FormatError {
    using FormatError::FormatError;
};
struct UnknownVersionError : FormatError {
    using FormatError::FormatError;
};
struct NameSetError : FormatError {
    using FormatError::FormatError;
};

}  // namespace proctrain
