#pragma once

#include <stdexcept>
#include <string>

namespace underspec {

// Error kinds map onto CLI exit codes: config/usage -> 2, file -> 3, numeric -> 4.
enum class ErrorKind {
    InvalidConfig,
    ShapeMismatch,
    BadMagic,
    TruncatedFile,
    DimensionMismatch,
    FileError,
    NonFinite,
    Degenerate,
};

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, std::string message)
        : std::runtime_error(std::move(message)), kind_(kind) {}

    ErrorKind kind() const { return kind_; }

    int exit_code() const {
        switch (kind_) {
            case ErrorKind::InvalidConfig: return 2;
            case ErrorKind::ShapeMismatch:
            case ErrorKind::NonFinite:
            case ErrorKind::Degenerate: return 4;
            default: return 3;
        }
    }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& msg) {
    throw Error(kind, msg);
}

} // namespace underspec
