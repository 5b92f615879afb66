#pragma once

#include <stdexcept>
#include <string>

namespace poguise {

// Shape mismatches between tensors or between a tensor and an op contract.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error("shape error: " + msg) {}
};

// NaN/Inf escaped an op, or a verification run failed numerically.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error("numeric error: " + msg) {}
};

// Invalid or inconsistent configuration supplied by the caller.
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

// Malformed file contents (bad magic, truncated payload, invalid JSON...).
struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg) : std::runtime_error("format error: " + msg) {}
};

} // namespace poguise
