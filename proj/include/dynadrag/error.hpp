#pragma once

#include <stdexcept>
#include <string>

namespace dynadrag {

enum class ErrorKind {
    InvalidArgument,
    Encoding,
    NotFound,
    Conflict,
    Unavailable,
    Numerical,
    Io,
};

/// Library-wide exception. The kind maps onto HTTP status classes in the service.
class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& what) { throw Error(kind, what); }

inline void require(bool cond, const std::string& what, ErrorKind kind = ErrorKind::InvalidArgument) {
    if (!cond) {
        throw Error(kind, what);
    }
}

}  // namespace dynadrag
