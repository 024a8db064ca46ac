#pragma once

#include <stdexcept>
#include <string>

namespace dacvlm {

// Error taxonomy shared across the library. The CLI maps these onto
// process exit codes (usage/config -> 2, numeric -> 3, io -> 4).
struct DimensionError : std::runtime_error {
    explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

struct UsageError : std::runtime_error {
    explicit UsageError(const std::string& msg) : std::runtime_error(msg) {}
};

struct TrainingError : std::runtime_error {
    TrainingError(const std::string& msg, long step)
        : std::runtime_error(msg + " (step " + std::to_string(step) + ")"), step(step) {}
    long step;
};

}  // namespace dacvlm
