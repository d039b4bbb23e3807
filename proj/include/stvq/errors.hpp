#pragma once

#include <stdexcept>
#include <string>

namespace stvq {

// Base for everything thrown by this library.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Tensor extents disagree (matmul inner dims, broadcast, optimizer shapes).
struct ShapeError : Error {
    using Error::Error;
};

// Invalid configuration value (anchor count < 2, D not divisible by heads, ...).
struct ConfigError : Error {
    using Error::Error;
};

// Invalid input data (empty video, empty manifest, too few samples).
struct InputError : Error {
    using Error::Error;
};

// Out-of-range index (slice bounds, class target, frame index).
struct IndexError : Error {
    using Error::Error;
};

// A caller broke an API contract (non-scalar loss, row-count mismatch).
struct ContractError : Error {
    using Error::Error;
};

// Operation on an object in the wrong state (predicting with an unfitted decoder).
struct StateError : Error {
    using Error::Error;
};

// Binary/structured file violates its format (bad magic, truncated payload,
// version mismatch, index/body inconsistency). The message names the violation.
struct FormatError : Error {
    using Error::Error;
};

// Structured text (manifest, config) failed to parse or validate.
struct ParseError : Error {
    using Error::Error;
};

// Metric input is degenerate (constant vector: correlation undefined).
struct DegenerateInputError : Error {
    using Error::Error;
};

} // namespace stvq
