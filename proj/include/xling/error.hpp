#pragma once

#include <stdexcept>
#include <string>

namespace xling {

// Exit-code taxonomy used by the CLI: usage/config errors map to 1,
// data errors to 2, numerical aborts to 3.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct DataError : std::runtime_error {
    explicit DataError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericalError : std::runtime_error {
    explicit NumericalError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace xling
