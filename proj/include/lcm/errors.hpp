#pragma once

#include <stdexcept>
#include <string>

namespace lcm {

// Invalid run configuration (bad hyperparameter, impossible split, ...).
struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

// Tensor shape disagreement; message names both shapes.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& msg) : std::runtime_error(msg) {}
};

// NaN/Inf produced by a forward operation, or misuse of the tape.
struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error(msg) {}
};

// A scan region with zero variance; Pearson correlation is undefined.
struct DegenerateSignal : std::runtime_error {
    explicit DegenerateSignal(const std::string& msg) : std::runtime_error(msg) {}
};

// File I/O and on-disk format violations.
struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error(msg) {}
};

// Manifest / label / schema validation failures.
struct ValidationError : std::runtime_error {
    explicit ValidationError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace lcm
