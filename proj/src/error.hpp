#pragma once

#include <stdexcept>
#include <string>

namespace blora {

// Error taxonomy shared by the library, the C API and the CLI exit codes.
enum class error_kind {
    usage     = 1,  // bad arguments / preconditions
    format    = 2,  // malformed input files
    invariant = 3,  // domain invariant violated (overlap, shape mismatch, ...)
    internal  = 4,
};

class error : public std::runtime_error {
public:
    error(error_kind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    error_kind kind() const { return kind_; }

private:
    error_kind kind_;
};

[[noreturn]] inline void fail_usage(const std::string& msg) { throw error(error_kind::usage, msg); }
[[noreturn]] inline void fail_format(const std::string& msg) { throw error(error_kind::format, msg); }
[[noreturn]] inline void fail_invariant(const std::string& msg) { throw error(error_kind::invariant, msg); }

} // namespace blora
