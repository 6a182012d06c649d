#pragma once

#include <stdexcept>
#include <string>

namespace oft {

// Invalid user-supplied configuration (bad geometry, bad key, bad value).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// A caller broke an operation contract (wrong shapes, bad preconditions).
struct ContractError : std::logic_error {
    explicit ContractError(const std::string& what) : std::logic_error(what) {}
};

// Unrecoverable runtime failure (NaN loss, unreadable checkpoint, ...).
struct RuntimeFailure : std::runtime_error {
    explicit RuntimeFailure(const std::string& what) : std::runtime_error(what) {}
};

}  // namespace oft
