#include "dakit/error.hpp"

namespace dakit {

const char* to_string(ErrorKind kind) noexcept {
    switch (kind) {
        case ErrorKind::argument: return "argument";
        case ErrorKind::configuration: return "configuration";
        case ErrorKind::precondition: return "precondition";
        case ErrorKind::numeric: return "numeric";
        case ErrorKind::domain: return "domain";
        case ErrorKind::degenerate: return "degenerate";
        case ErrorKind::non_convergence: return "non_convergence";
        case ErrorKind::rank: return "rank";
        case ErrorKind::construction: return "construction";
        case ErrorKind::evaluation: return "evaluation";
        case ErrorKind::parse: return "parse";
        case ErrorKind::io: return "io";
    }
    return "unknown";
}

void fail(ErrorKind kind, const std::string& message) { throw Error(kind, message); }

}  // namespace dakit
