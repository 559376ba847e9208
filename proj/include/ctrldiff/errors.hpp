#pragma once

#include <stdexcept>
#include <string>

namespace ctrldiff {

// Error hierarchy. Each kind maps onto a standard exception base so callers
// that only care about the broad category can catch std::invalid_argument etc.

struct DomainError : std::domain_error {
    using std::domain_error::domain_error;
};

struct InvalidInput : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

struct OrderingError : InvalidInput {
    using InvalidInput::InvalidInput;
};

struct DegenerateInput : InvalidInput {
    using InvalidInput::InvalidInput;
};

struct EncodingError : InvalidInput {
    using InvalidInput::InvalidInput;
};

struct IngestionError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct CapacityError : std::length_error {
    using std::length_error::length_error;
};

struct ConfigurationError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct TrainingError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace ctrldiff
