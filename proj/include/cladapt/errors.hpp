#pragma once

#include <stdexcept>
#include <string>

namespace cladapt {

// Dimension or length mismatch between operands.
class ShapeError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Invalid parameters, empty inputs, unknown strategy names, etc.
class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// NaN or otherwise non-finite values where finite ones are required.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Corrupted, truncated or inconsistent persisted data.
class IntegrityError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

}  // namespace cladapt
