#pragma once

#include <stdexcept>
#include <string>

namespace cipa {

// Error taxonomy shared by the whole library. The CLI maps these onto
// process exit codes (validation 1, suite failure 2, numeric fault 3).
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape/geometry violations detected before any compute runs.
struct ShapeError : Error {
    using Error::Error;
};

// Precondition violations other than shapes (empty sequence, non-binary
// mask, bad config values, ...).
struct ContractError : Error {
    using Error::Error;
};

// NaN/Inf produced by a forward op, or a non-finite loss.
struct NumericFault : Error {
    using Error::Error;
};

// File format / filesystem problems.
struct IoError : Error {
    using Error::Error;
};

namespace fault {

// Fault injection hook for harness self-tests (`verify --inject-fault scan`).
// When a target is armed the named kernel deliberately mis-computes so the
// verification suites must go red.
inline std::string& target() {
    static std::string t;
    return t;
}

inline void inject(const std::string& name) { target() = name; }
inline void clear() { target().clear(); }
inline bool active(const char* name) { return target() == name; }

}  // namespace fault

}  // namespace cipa
