#pragma once

#include <stdexcept>
#include <string>

namespace dakit {

// Failure categories shared by every module. The C API maps each one to a
// stable status code, so the order here is part of the ABI.
enum class ErrorKind {
    argument = 1,
    configuration,
    precondition,
    numeric,
    domain,
    degenerate,
    non_convergence,
    rank,
    construction,
    evaluation,
    parse,
    io,
};

const char* to_string(ErrorKind kind) noexcept;

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] void fail(ErrorKind kind, const std::string& message);

inline void require(bool condition, ErrorKind kind, const std::string& message) {
    if (!condition) fail(kind, message);
}

}  // namespace dakit
